#!/usr/bin/env node
/**
 * Stdio entry point: `sandbox-runner --json < request.json > result.json`.
 *
 * Script failures are data (a result with a non-ok status, exit 0);
 * environment and protocol problems produce an error envelope and a
 * non-zero exit so callers can tell the two apart.
 */

import { EnvironmentError, execute } from "./runner.js";
import { parseRequest, ProtocolError, type ErrorEnvelope } from "./protocol.js";

const USAGE = `usage: sandbox-runner --json < request.json > result.json

Reads one JSON request {script, timeout_s, workdir} on stdin, executes the
script with the Python interpreter ($CHARTFORGE_SANDBOX_PY or python3) in
the given working directory, and writes one JSON result to stdout.
`;

async function readStdin(): Promise<string> {
  const chunks: Buffer[] = [];
  for await (const chunk of process.stdin) {
    chunks.push(chunk as Buffer);
  }
  return Buffer.concat(chunks).toString("utf8");
}

function emitError(kind: "environment" | "protocol", detail: string): void {
  const envelope: ErrorEnvelope = { error: { kind, detail } };
  process.stdout.write(JSON.stringify(envelope) + "\n");
}

async function main(): Promise<number> {
  const args = process.argv.slice(2);
  if (args.includes("--help") || args.includes("-h")) {
    process.stdout.write(USAGE);
    return 0;
  }
  if (!args.includes("--json")) {
    process.stderr.write(USAGE);
    return 2;
  }
  let raw: string;
  try {
    raw = await readStdin();
  } catch (err) {
    emitError("protocol", `cannot read stdin: ${String(err)}`);
    return 1;
  }
  try {
    const request = parseRequest(raw);
    const result = await execute(request);
    process.stdout.write(JSON.stringify(result) + "\n");
    return 0;
  } catch (err) {
    if (err instanceof ProtocolError) {
      emitError("protocol", err.message);
      return 1;
    }
    if (err instanceof EnvironmentError) {
      emitError("environment", err.message);
      return 1;
    }
    emitError("environment", `unexpected failure: ${String(err)}`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
