import { StationClient } from "./api.js";
import { boxValid, normalizeDrag, Point, RawBox } from "./boxes.js";
import { AnnotationDraft, ImageBox, ReviewItem } from "./types.js";

export type ReviewMode = "empty" | "reviewing" | "annotating" | "posting";

export interface ReviewView {
  showItem(item: ReviewItem | null): void;
  showDraft(boxes: ImageBox[]): void;
  setAnnotating(on: boolean): void;
  setSubmitEnabled(on: boolean): void;
  setUnsent(on: boolean): void;
  promptClassName(existing: string[]): Promise<string | null>;
  showError(message: string): void;
}

// Keyboard-first review loop: N posts "uninteresting" for the frame on
// screen, I opens the box-drawing overlay; a decision is only ever posted
// for the currently displayed frame, one per explicit user action.
export class ReviewController {
  mode: ReviewMode = "empty";
  current: ReviewItem | null = null;
  draft: AnnotationDraft | null = null;
  knownClasses: string[] = [];

  constructor(
    private client: StationClient,
    private view: ReviewView,
  ) {}

  async start(): Promise<void> {
    await this.refreshClasses();
    await this.loadNext();
  }

  async refreshClasses(): Promise<void> {
    try {
      const status = await this.client.status();
      this.knownClasses = status.classes;
    } catch {
      // autocomplete is a convenience; review works without it
    }
  }

  async loadNext(): Promise<void> {
    const item = await this.client.nextItem();
    this.current = item;
    this.draft = null;
    this.mode = item ? "reviewing" : "empty";
    this.view.showItem(item);
    this.view.showDraft([]);
    this.view.setAnnotating(false);
    this.view.setSubmitEnabled(false);
  }

  async handleKey(key: string): Promise<void> {
    if (this.mode === "reviewing") {
      if (key === "n" || key === "N") {
        await this.postAndAdvance({
          frame_id: this.current!.frame_id,
          decision: "uninteresting",
          boxes: [],
        });
      } else if (key === "i" || key === "I") {
        this.mode = "annotating";
        this.draft = { frame_id: this.current!.frame_id, boxes: [] };
        this.view.setAnnotating(true);
        this.view.setSubmitEnabled(false);
      }
    } else if (this.mode === "annotating" && key === "Escape") {
      this.cancelAnnotation();
    }
  }

  cancelAnnotation(): void {
    if (this.mode !== "annotating") return;
    this.mode = "reviewing";
    this.draft = null;
    this.view.setAnnotating(false);
    this.view.showDraft([]);
    this.view.setSubmitEnabled(false);
  }

  // Called by the overlay with drag endpoints already in image pixels.
  async finishBox(a: Point, b: Point): Promise<void> {
    if (this.mode !== "annotating" || !this.draft) return;
    const raw: RawBox | null = normalizeDrag(a, b);
    if (raw === null || !boxValid(raw)) {
      return; // degenerate drag, nothing to add
    }
    const name = await this.view.promptClassName(this.knownClasses);
    if (!name || !name.trim()) {
      return;
    }
    this.draft.boxes.push({ ...raw, class: name.trim() });
    this.view.showDraft(this.draft.boxes);
    this.view.setSubmitEnabled(this.draftValid());
  }

  draftValid(): boolean {
    return (
      this.draft !== null &&
      this.draft.boxes.length > 0 &&
      this.draft.boxes.every((b) => boxValid(b))
    );
  }

  async submitDraft(): Promise<void> {
    if (this.mode !== "annotating" || !this.draftValid()) return;
    const draft = this.draft!;
    await this.postAndAdvance({
      frame_id: draft.frame_id,
      decision: "interesting",
      boxes: draft.boxes,
    });
  }

  private async postAndAdvance(payload: {
    frame_id: string;
    decision: "interesting" | "uninteresting";
    boxes: ImageBox[];
  }): Promise<void> {
    this.mode = "posting";
    this.view.setUnsent(true);
    try {
      await this.client.postDecisionWithRetry(payload);
      this.view.setUnsent(false);
    } catch (err) {
      // surfaced verbatim (e.g. the station's novel-capacity error)
      this.view.showError(err instanceof Error ? err.message : String(err));
      this.view.setUnsent(false);
      this.mode = "reviewing";
      return;
    }
    if (payload.decision === "interesting") {
      await this.refreshClasses();
    }
    await this.loadNext();
  }
}
