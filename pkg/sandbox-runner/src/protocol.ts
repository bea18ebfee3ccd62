/**
 * Wire format: one SandboxRequest in on stdin, one SandboxResult (or an
 * error envelope) out on stdout per invocation.
 */

export type SandboxStatus = "ok" | "exec_error" | "timeout" | "no_figure";

export interface SandboxRequest {
  script: string;
  timeout_s: number;
  workdir: string;
}

export interface SandboxResult {
  status: SandboxStatus;
  exit_code: number | null;
  stderr_tail: string;
  figure_file: string | null;
  wall_time_ms: number;
}

export interface ErrorEnvelope {
  error: {
    kind: "environment" | "protocol";
    detail: string;
  };
}

/** The script must save its figure to exactly this relative path. */
export const FIGURE_FILENAME = "figure.png";
export const STDERR_TAIL_BYTES = 4096;
/** execute() always returns within timeout_s + this grace window. */
export const KILL_GRACE_MS = 5000;

export class ProtocolError extends Error {}

export function parseRequest(raw: string): SandboxRequest {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch (err) {
    throw new ProtocolError(`request is not valid JSON: ${String(err)}`);
  }
  if (typeof data !== "object" || data === null) {
    throw new ProtocolError("request must be a JSON object");
  }
  const obj = data as Record<string, unknown>;
  if (typeof obj.script !== "string" || obj.script.length === 0) {
    throw new ProtocolError("request.script must be a non-empty string");
  }
  const timeout = obj.timeout_s;
  if (typeof timeout !== "number" || !Number.isFinite(timeout) || timeout < 1) {
    throw new ProtocolError("request.timeout_s must be a positive number");
  }
  if (typeof obj.workdir !== "string" || obj.workdir.length === 0) {
    throw new ProtocolError("request.workdir must be a non-empty path");
  }
  return { script: obj.script, timeout_s: timeout, workdir: obj.workdir };
}
