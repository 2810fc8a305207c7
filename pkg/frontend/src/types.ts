export interface ReviewItem {
  frame_id: string;
  score: number;
  received_at: number;
  image_base64: string;
}

export interface ImageBox {
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
  class: string;
}

export interface AnnotationDraft {
  frame_id: string;
  boxes: ImageBox[];
}

export interface DecisionPayload {
  frame_id: string;
  decision: "interesting" | "uninteresting";
  boxes: ImageBox[];
}

export interface MissionStatus {
  pending: number;
  reviewed: number;
  head_version: number;
  classes: string[];
  novel_shots: number;
  shots_per_class: Record<string, number>;
}

export interface StationEvent {
  t: number;
  kind: string;
  [key: string]: unknown;
}
