import { DecisionPayload, MissionStatus, ReviewItem } from "./types.js";

export type FetchLike = typeof fetch;
export type Sleep = (ms: number) => Promise<void>;

const defaultSleep: Sleep = (ms) => new Promise((resolve) => setTimeout(resolve, ms));

export interface RetryOptions {
  attempts: number;
  baseDelayMs: number;
  onRetry?: (attempt: number) => void;
}

export class StationClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
    private sleep: Sleep = defaultSleep,
  ) {}

  async nextItem(): Promise<ReviewItem | null> {
    const resp = await this.fetchImpl(`${this.baseUrl}/queue/next`);
    if (resp.status === 404) {
      return null;
    }
    if (!resp.ok) {
      throw new Error(`queue/next failed: ${resp.status}`);
    }
    return (await resp.json()) as ReviewItem;
  }

  async status(): Promise<MissionStatus> {
    const resp = await this.fetchImpl(`${this.baseUrl}/mission/status`);
    if (!resp.ok) {
      throw new Error(`mission/status failed: ${resp.status}`);
    }
    return (await resp.json()) as MissionStatus;
  }

  async postDecision(payload: DecisionPayload): Promise<void> {
    const resp = await this.fetchImpl(`${this.baseUrl}/decision`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!resp.ok) {
      const detail = await resp.text();
      throw new Error(`decision rejected (${resp.status}): ${detail}`);
    }
  }

  // Network failures retry with exponential backoff; the server dedupes by
  // frame id, so a retried POST stays idempotent.
  async postDecisionWithRetry(
    payload: DecisionPayload,
    opts: RetryOptions = { attempts: 5, baseDelayMs: 500 },
  ): Promise<void> {
    let lastError: unknown;
    for (let attempt = 0; attempt < opts.attempts; attempt++) {
      try {
        await this.postDecision(payload);
        return;
      } catch (err) {
        lastError = err;
        // a 4xx rejection is final; only network-style failures retry
        if (err instanceof Error && /rejected \(4\d\d\)/.test(err.message)) {
          throw err;
        }
        opts.onRetry?.(attempt + 1);
        await this.sleep(opts.baseDelayMs * 2 ** attempt);
      }
    }
    throw lastError;
  }
}
