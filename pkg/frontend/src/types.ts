/** Wire shapes of the screening service. The console renders these verbatim;
 * it never derives a verdict, threshold, or diagnosis of its own. */

export type Eye = "left" | "right";

export type CaptureAction =
  | "prompt-recapture"
  | "eye-accepted"
  | "ready-to-screen"
  | "session-ungradable";

export interface QualityVerdict {
  attempt: number;
  score: number;
  gradable: boolean;
  reasons: string[];
}

export interface CaptureReply {
  action: CaptureAction;
  verdict: QualityVerdict | null;
}

export interface SessionCreated {
  session_id: string;
  eyes: Eye[];
}

export interface PviEntry {
  score?: number;
  decision?: boolean;
  threshold?: number;
  error?: StageError;
}

export interface StageError {
  stage: string;
  message: string;
}

export interface DiagnosisEntry {
  probs?: Record<string, number>;
  positives?: string[];
  thresholds?: Record<string, number>;
  error?: StageError;
}

export interface LesionEntry {
  component_count?: number;
  components?: { area: number; bbox: number[] }[];
  overlay_asset?: string;
  mask_asset?: string;
  error?: StageError;
}

export interface EyeReport {
  accepted: boolean;
  quality_attempts: Record<string, unknown>[];
  failed_stages: string[];
  pvi?: PviEntry;
  diagnosis?: DiagnosisEntry;
  lesions?: LesionEntry;
}

export interface Report {
  session_id: string;
  patient_ref: string;
  generated_at: string;
  ungradable: boolean;
  eyes: Record<string, EyeReport>;
  referral_recommended: boolean;
  manual_review: boolean;
  operating_point: Record<string, unknown>;
  timings_ms: Record<string, number>;
}

export interface ReferralRecord {
  session_id: string;
  issued_at: string;
  reason: string;
  destination: string;
}

export interface ErrorEnvelope {
  error: { code: string; message: string };
}
