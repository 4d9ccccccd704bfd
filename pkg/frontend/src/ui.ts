/** DOM binding: renders the SessionFlow state and forwards operator actions.
 * No clinical logic lives here; everything shown comes out of the flow state. */

import { SessionFlow } from "./model.js";
import type { Eye } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  cls?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class ConsoleUi {
  private readonly root: HTMLElement;

  constructor(private readonly flow: SessionFlow, root: HTMLElement) {
    this.root = root;
    flow.onChange(() => this.render());
    this.render();
  }

  private render(): void {
    const flow = this.flow;
    this.root.replaceChildren();

    const header = el("header");
    header.append(el("h1", undefined, "Vision screening console"));
    const newBtn = el("button", "primary", "New session");
    newBtn.disabled = flow.busy;
    newBtn.onclick = () => void flow.newSession(`walk-in-${Date.now()}`);
    header.append(newBtn);
    if (flow.sessionId) {
      header.append(el("span", "session-id", `session ${flow.sessionId}`));
    }
    this.root.append(header);

    if (flow.error) {
      const bar = el("div", "error-bar");
      bar.append(el("span", undefined, `${flow.error.code}: ${flow.error.message}`));
      if (flow.error.retry) {
        const retry = el("button", undefined, "Retry");
        const retryFn = flow.error.retry;
        retry.onclick = () => void retryFn();
        bar.append(retry);
      }
      this.root.append(bar);
    }

    if (flow.banner) {
      const banner = el("div", "recapture-banner");
      banner.append(
        el("strong", undefined, `Re-capture the ${flow.banner.eye} eye`),
        el("span", undefined, flow.banner.reasons.join(", ")),
      );
      this.root.append(banner);
    }

    if (flow.phase === "idle") {
      this.root.append(el("p", "hint", "Start a session to begin capturing."));
      return;
    }

    const eyesRow = el("div", "eyes");
    for (const eye of flow.eyes) this.renderEye(eyesRow, eye);
    this.root.append(eyesRow);

    if (flow.phase === "ready") {
      const screenBtn = el("button", "primary", "Run screening");
      screenBtn.disabled = flow.busy;
      screenBtn.onclick = () => void flow.runScreening();
      this.root.append(screenBtn);
    }
    if (flow.phase === "screening") {
      this.root.append(el("p", "hint", "Screening in progress…"));
    }
    if (flow.report) this.renderReport();
  }

  private renderEye(container: HTMLElement, eye: Eye): void {
    const flow = this.flow;
    const card = el("section", "eye-card");
    card.append(el("h2", undefined, `${eye} eye`));

    const url = flow.imageUrl(eye);
    if (url) {
      const img = el("img", "capture");
      img.src = url;
      img.alt = `${eye} capture`;
      card.append(img);
    }

    const verdict = flow.captures.get(eye)?.verdict;
    if (verdict) {
      const line = el(
        "p",
        verdict.gradable ? "verdict ok" : "verdict bad",
        `quality ${verdict.score.toFixed(3)} · ${verdict.gradable ? "gradable" : "not gradable"}` +
          ` · attempt ${verdict.attempt}`,
      );
      card.append(line);
    }

    const canUpload =
      (flow.phase === "capturing" || flow.phase === "ready") &&
      !flow.captures.get(eye)?.accepted;
    if (canUpload) {
      const input = el("input") as HTMLInputElement;
      input.type = "file";
      input.accept = "image/png";
      input.disabled = flow.busy;
      input.onchange = () => {
        const file = input.files?.[0];
        if (file) void flow.uploadCapture(eye, file, URL.createObjectURL(file));
      };
      card.append(input);
    }

    if (flow.overlayAvailable(eye)) {
      const toggle = el("button", undefined,
        flow.captures.get(eye)?.showOverlay ? "Show original" : "Show lesion overlay");
      toggle.onclick = () => flow.toggleOverlay(eye);
      card.append(toggle);
    }
    container.append(card);
  }

  private renderReport(): void {
    const flow = this.flow;
    const report = flow.report!;
    const panel = el("section", "report");
    panel.append(el("h2", undefined, "Screening report"));
    if (report.ungradable) {
      panel.append(el("p", "verdict bad", "Ungradable after the allowed capture attempts."));
    }
    for (const [eye, entry] of Object.entries(report.eyes)) {
      const row = el("div", "report-eye");
      row.append(el("h3", undefined, eye));
      if (entry.pvi?.score !== undefined) {
        row.append(
          el(
            "p",
            entry.pvi.decision ? "verdict bad" : "verdict ok",
            `impairment score ${entry.pvi.score.toFixed(6)} → ${entry.pvi.decision ? "POSITIVE" : "negative"}`,
          ),
        );
      } else if (entry.pvi?.error) {
        row.append(el("p", "verdict bad", `PVI failed: ${entry.pvi.error.message}`));
      }
      if (entry.diagnosis?.positives) {
        const chips = el("div", "chips");
        if (entry.diagnosis.positives.length === 0) {
          chips.append(el("span", "chip muted", "no specific category; see Others score"));
        }
        for (const label of entry.diagnosis.positives) {
          chips.append(el("span", "chip", label));
        }
        row.append(chips);
      }
      panel.append(row);
    }
    panel.append(
      el(
        "p",
        report.referral_recommended ? "verdict bad" : "verdict ok",
        report.referral_recommended ? "Referral recommended" : "No referral recommended",
      ),
    );
    if (report.manual_review) {
      panel.append(el("p", "verdict bad", "Manual review required (a stage failed)."));
    }

    const referBtn = el("button", "primary", "Confirm referral");
    referBtn.disabled = !flow.referralEnabled() || flow.busy;
    referBtn.onclick = () => void flow.confirmReferral("tertiary-eye-center");
    panel.append(referBtn);
    if (flow.referral) {
      panel.append(
        el("p", "hint", `Referred to ${flow.referral.destination} at ${flow.referral.issued_at}`),
      );
    }
    this.root.append(panel);
  }
}
