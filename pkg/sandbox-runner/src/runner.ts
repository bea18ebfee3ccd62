/**
 * Executes one plotting script in a child Python process.
 *
 * Isolation model: throwaway working directory, sanitized environment (no
 * proxies, no credential-looking variables), headless rendering forced,
 * its own process group so a timeout kill takes the whole tree down.
 */

import { spawn } from "node:child_process";
import { promises as fs } from "node:fs";
import path from "node:path";

import {
  FIGURE_FILENAME,
  KILL_GRACE_MS,
  STDERR_TAIL_BYTES,
  type SandboxRequest,
  type SandboxResult,
  type SandboxStatus,
} from "./protocol.js";

export const INTERPRETER_ENV = "CHARTFORGE_SANDBOX_PY";

/** The runtime itself is broken or missing; distinct from script failure. */
export class EnvironmentError extends Error {}

const BLOCKED_ENV_EXACT = new Set(
  [
    "HTTP_PROXY",
    "HTTPS_PROXY",
    "ALL_PROXY",
    "NO_PROXY",
    "FTP_PROXY",
  ].flatMap((name) => [name, name.toLowerCase()]),
);
const BLOCKED_ENV_PATTERN = /(API_KEY|APIKEY|SECRET|TOKEN|PASSWORD|CREDENTIAL)/i;

function sanitizedEnv(): NodeJS.ProcessEnv {
  const env: NodeJS.ProcessEnv = {};
  for (const [key, value] of Object.entries(process.env)) {
    if (BLOCKED_ENV_EXACT.has(key) || BLOCKED_ENV_PATTERN.test(key)) continue;
    env[key] = value;
  }
  env.MPLBACKEND = "Agg"; // headless: no display server in CI
  return env;
}

function killTree(pid: number | undefined): void {
  if (pid === undefined) return;
  try {
    process.kill(-pid, "SIGKILL"); // negative pid: the whole process group
  } catch {
    // Already gone.
  }
}

type ChildOutcome =
  | { kind: "exit"; code: number | null }
  | { kind: "timeout" }
  | { kind: "spawn_error"; detail: string };

export async function execute(request: SandboxRequest): Promise<SandboxResult> {
  const workdir = path.resolve(request.workdir);
  await fs.rm(workdir, { recursive: true, force: true });
  await fs.mkdir(workdir, { recursive: true });
  const scriptPath = path.join(workdir, "script.py");
  await fs.writeFile(scriptPath, request.script, "utf8");

  const interpreter = process.env[INTERPRETER_ENV] || "python3";
  const started = Date.now();
  const child = spawn(interpreter, [scriptPath], {
    cwd: workdir,
    env: sanitizedEnv(),
    detached: true,
    stdio: ["ignore", "ignore", "pipe"],
  });

  let stderrBuf = Buffer.alloc(0);
  child.stderr.on("data", (chunk: Buffer) => {
    stderrBuf = Buffer.concat([stderrBuf, chunk]);
    if (stderrBuf.length > 4 * STDERR_TAIL_BYTES) {
      stderrBuf = stderrBuf.subarray(stderrBuf.length - STDERR_TAIL_BYTES);
    }
  });

  const outcome = await new Promise<ChildOutcome>((resolve) => {
    let settled = false;
    let timedOut = false;
    const settle = (value: ChildOutcome) => {
      if (!settled) {
        settled = true;
        clearTimeout(killTimer);
        clearTimeout(graceTimer!);
        resolve(value);
      }
    };
    let graceTimer: NodeJS.Timeout | undefined;
    const killTimer = setTimeout(() => {
      timedOut = true;
      killTree(child.pid);
      // Backstop: report the timeout even if the exit event never fires.
      graceTimer = setTimeout(() => settle({ kind: "timeout" }), KILL_GRACE_MS - 1000);
    }, request.timeout_s * 1000);
    child.on("error", (err) => settle({ kind: "spawn_error", detail: String(err) }));
    child.on("exit", (code) => {
      if (timedOut) {
        settle({ kind: "timeout" });
      } else {
        settle({ kind: "exit", code });
      }
    });
  });
  // Nothing may outlive this call, whatever the outcome.
  killTree(child.pid);

  const wallTime = Date.now() - started;
  const stderrTail = stderrBuf.subarray(-STDERR_TAIL_BYTES).toString("utf8");

  if (outcome.kind === "spawn_error") {
    throw new EnvironmentError(
      `cannot run interpreter ${interpreter}: ${outcome.detail}`,
    );
  }

  let status: SandboxStatus;
  let figureFile: string | null = null;
  const exitCode = outcome.kind === "exit" ? outcome.code : null;
  if (outcome.kind === "timeout") {
    status = "timeout";
  } else if (exitCode === 0) {
    const figurePath = path.join(workdir, FIGURE_FILENAME);
    const size = await fs
      .stat(figurePath)
      .then((s) => s.size)
      .catch(() => 0);
    if (size > 0) {
      status = "ok";
      figureFile = figurePath;
    } else {
      status = "no_figure";
    }
  } else {
    status = "exec_error";
  }

  return {
    status,
    exit_code: exitCode,
    stderr_tail: stderrTail,
    figure_file: figureFile,
    wall_time_ms: wallTime,
  };
}
