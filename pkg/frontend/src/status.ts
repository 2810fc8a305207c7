import { MissionStatus, StationEvent } from "./types.js";

export interface SocketLike {
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;
export type Scheduler = (fn: () => void, ms: number) => unknown;

// Event-stream subscription with exponential-backoff reconnect.
export class EventSocket {
  private delayMs: number;
  private closed = false;
  private eventHandlers: ((e: StationEvent) => void)[] = [];
  private connectionHandlers: ((up: boolean) => void)[] = [];

  constructor(
    private url: string,
    private factory: SocketFactory,
    private schedule: Scheduler = (fn, ms) => setTimeout(fn, ms),
    private baseDelayMs = 500,
    private maxDelayMs = 15000,
  ) {
    this.delayMs = baseDelayMs;
  }

  onEvent(fn: (e: StationEvent) => void): void {
    this.eventHandlers.push(fn);
  }

  onConnection(fn: (up: boolean) => void): void {
    this.connectionHandlers.push(fn);
  }

  connect(): void {
    if (this.closed) return;
    const sock = this.factory(this.url);
    sock.onopen = () => {
      this.delayMs = this.baseDelayMs;
      this.connectionHandlers.forEach((fn) => fn(true));
    };
    sock.onmessage = (ev) => {
      const event = JSON.parse(ev.data) as StationEvent;
      this.eventHandlers.forEach((fn) => fn(event));
    };
    sock.onclose = () => {
      this.connectionHandlers.forEach((fn) => fn(false));
      if (this.closed) return;
      this.schedule(() => this.connect(), this.delayMs);
      this.delayMs = Math.min(this.delayMs * 2, this.maxDelayMs);
    };
  }

  close(): void {
    this.closed = true;
  }
}

export interface PanelState {
  pending: number;
  headVersion: number;
  classes: string[];
  shotsPerClass: Record<string, number>;
  lastSync: number | null;
  stale: boolean;
}

// Derives the live dashboard state from the station event stream.
export class StatusPanel {
  state: PanelState = {
    pending: 0,
    headVersion: 1,
    classes: [],
    shotsPerClass: {},
    lastSync: null,
    stale: true,
  };
  private renderers: ((s: PanelState) => void)[] = [];

  onRender(fn: (s: PanelState) => void): void {
    this.renderers.push(fn);
    fn(this.state);
  }

  seed(status: MissionStatus): void {
    this.state.pending = status.pending;
    this.state.headVersion = status.head_version;
    this.state.classes = [...status.classes];
    this.state.shotsPerClass = { ...status.shots_per_class };
    this.render();
  }

  setConnected(up: boolean): void {
    this.state.stale = !up;
    this.render();
  }

  apply(event: StationEvent): void {
    switch (event.kind) {
      case "candidate":
        this.state.pending += 1;
        break;
      case "decision":
        this.state.pending = Math.max(0, this.state.pending - 1);
        break;
      case "class_registered":
        this.state.classes.push(String(event.class_name));
        break;
      case "shot": {
        const name = String(event.class_name);
        this.state.shotsPerClass[name] = (this.state.shotsPerClass[name] ?? 0) + 1;
        break;
      }
      case "cycle":
      case "delta":
        this.state.headVersion = Number(event.version);
        if (event.kind === "delta") {
          this.state.lastSync = Number(event.t);
        }
        break;
      default:
        return; // nothing to render
    }
    this.render();
  }

  private render(): void {
    this.renderers.forEach((fn) => fn(this.state));
  }
}
