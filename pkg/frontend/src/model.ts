/** Session flow view-model: a pure projection of service responses.
 *
 * All clinical content (verdicts, scores, reasons, diagnosis, the referral
 * recommendation) is byte-sourced from the service; this layer only tracks
 * which of it to show. Keeping it DOM-free is what the contract tests rely on.
 */

import { ServiceClient, ServiceError } from "./api.js";
import type { CaptureReply, Eye, QualityVerdict, ReferralRecord, Report } from "./types.js";

export type Phase =
  | "idle"
  | "capturing"
  | "ready"
  | "screening"
  | "report"
  | "referred";

export interface CaptureView {
  verdict: QualityVerdict | null;
  localUrl: string | null;
  accepted: boolean;
  showOverlay: boolean;
}

export interface Banner {
  eye: Eye;
  reasons: string[];
}

export interface SurfacedError {
  code: string;
  message: string;
  retry: (() => Promise<void>) | null;
}

export class SessionFlow {
  readonly client: ServiceClient;
  phase: Phase = "idle";
  sessionId: string | null = null;
  eyes: Eye[] = [];
  captures = new Map<Eye, CaptureView>();
  banner: Banner | null = null;
  report: Report | null = null;
  referral: ReferralRecord | null = null;
  error: SurfacedError | null = null;
  busy = false;
  private listeners: (() => void)[] = [];

  constructor(client: ServiceClient) {
    this.client = client;
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  private capture(eye: Eye): CaptureView {
    let view = this.captures.get(eye);
    if (!view) {
      view = { verdict: null, localUrl: null, accepted: false, showOverlay: false };
      this.captures.set(eye, view);
    }
    return view;
  }

  /** Runs one service call with the uniform error surface + retry affordance. */
  private async guarded(op: () => Promise<void>): Promise<void> {
    if (this.busy) return; // uploads and actions are serialized per tab
    this.busy = true;
    this.error = null;
    this.notify();
    try {
      await op();
    } catch (err) {
      const e = err instanceof ServiceError ? err : new ServiceError(0, "client", String(err));
      this.error = { code: e.code, message: e.message, retry: () => this.guarded(op) };
    } finally {
      this.busy = false;
      this.notify();
    }
  }

  async newSession(patientRef: string): Promise<void> {
    await this.guarded(async () => {
      const created = await this.client.createSession(patientRef);
      this.sessionId = created.session_id;
      this.eyes = created.eyes;
      this.phase = "capturing";
      this.captures = new Map();
      this.banner = null;
      this.report = null;
      this.referral = null;
    });
  }

  async uploadCapture(eye: Eye, png: BodyInit, localUrl: string): Promise<void> {
    await this.guarded(async () => {
      if (!this.sessionId) throw new ServiceError(0, "client", "no active session");
      const reply: CaptureReply = await this.client.uploadCapture(this.sessionId, eye, png);
      const view = this.capture(eye);
      view.verdict = reply.verdict;
      view.localUrl = localUrl;
      if (reply.action === "prompt-recapture") {
        // reasons pass through verbatim; the banner is the operator's prompt
        this.banner = { eye, reasons: reply.verdict?.reasons ?? [] };
        return;
      }
      this.banner = null;
      if (reply.action === "eye-accepted") {
        view.accepted = true;
      } else if (reply.action === "ready-to-screen") {
        view.accepted = true;
        this.phase = "ready";
      } else if (reply.action === "session-ungradable") {
        this.report = await this.client.getReport(this.sessionId);
        this.phase = "report";
      }
    });
  }

  async runScreening(): Promise<void> {
    await this.guarded(async () => {
      if (!this.sessionId) throw new ServiceError(0, "client", "no active session");
      this.phase = "screening";
      this.notify();
      this.report = await this.client.screen(this.sessionId);
      this.phase = "report";
    });
  }

  async confirmReferral(destination: string): Promise<void> {
    await this.guarded(async () => {
      if (!this.sessionId) throw new ServiceError(0, "client", "no active session");
      this.referral = await this.client.issueReferral(this.sessionId, destination);
      this.phase = "referred";
    });
  }

  toggleOverlay(eye: Eye): void {
    const view = this.capture(eye);
    view.showOverlay = !view.showOverlay;
    this.notify();
  }

  /** The image to show for an eye: the local capture, or the service-rendered
   * overlay asset once toggled on. */
  imageUrl(eye: Eye): string | null {
    const view = this.captures.get(eye);
    if (!view) return null;
    if (view.showOverlay && this.sessionId && this.report) {
      const asset = this.report.eyes[eye]?.lesions?.overlay_asset;
      if (asset) return this.client.assetUrl(this.sessionId, asset);
    }
    return view.localUrl;
  }

  overlayAvailable(eye: Eye): boolean {
    return Boolean(this.report?.eyes[eye]?.lesions?.overlay_asset);
  }

  /** Mirrors the report invariant: the control is live only when the service
   * recommends a referral and none has been issued. */
  referralEnabled(): boolean {
    return Boolean(
      this.report?.referral_recommended && this.phase === "report" && !this.referral,
    );
  }
}
