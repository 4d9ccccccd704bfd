/** Thin typed client over the screening service HTTP API. */

import type {
  CaptureReply,
  Eye,
  ReferralRecord,
  Report,
  SessionCreated,
} from "./types.js";

export class ServiceError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(status: number, code: string, message: string) {
    super(message);
    this.code = code;
    this.status = status;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    // bind: browsers refuse an unbound fetch
    this.fetchImpl = fetchImpl ?? ((input, init) => globalThis.fetch(input, init));
  }

  assetUrl(sessionId: string, name: string): string {
    return `${this.base}/sessions/${sessionId}/assets/${name}`;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchImpl(`${this.base}${path}`, init);
    } catch (err) {
      throw new ServiceError(0, "network", `service unreachable: ${String(err)}`);
    }
    const text = await res.text();
    let doc: unknown = null;
    if (text) {
      try {
        doc = JSON.parse(text);
      } catch {
        throw new ServiceError(res.status, "bad-payload", `service sent non-JSON: ${text.slice(0, 120)}`);
      }
    }
    if (!res.ok) {
      const envelope = doc as { error?: { code?: string; message?: string } } | null;
      throw new ServiceError(
        res.status,
        envelope?.error?.code ?? "http-error",
        envelope?.error?.message ?? `HTTP ${res.status}`,
      );
    }
    return doc as T;
  }

  createSession(patientRef: string): Promise<SessionCreated> {
    return this.request<SessionCreated>("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ patient_ref: patientRef }),
    });
  }

  uploadCapture(sessionId: string, eye: Eye, png: BodyInit): Promise<CaptureReply> {
    return this.request<CaptureReply>(`/sessions/${sessionId}/captures?eye=${eye}`, {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png,
    });
  }

  screen(sessionId: string): Promise<Report> {
    return this.request<Report>(`/sessions/${sessionId}/screen`, { method: "POST" });
  }

  getReport(sessionId: string): Promise<Report> {
    return this.request<Report>(`/sessions/${sessionId}/report`);
  }

  issueReferral(sessionId: string, destination: string): Promise<ReferralRecord> {
    return this.request<ReferralRecord>(`/sessions/${sessionId}/referral`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ destination }),
    });
  }
}
