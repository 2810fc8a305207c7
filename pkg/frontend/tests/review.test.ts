import { beforeEach, describe, expect, it } from "vitest";

import { StationClient } from "../src/api.js";
import { mountOperatorConsole, pngDimensions, startOperatorConsole } from "../src/app.js";
import type { SocketFactory, SocketLike } from "../src/status.js";

function fakePng(width: number, height: number): string {
  const bytes = new Uint8Array(33);
  bytes.set([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]); // signature
  bytes.set([0, 0, 0, 13], 8); // IHDR length
  bytes.set([0x49, 0x48, 0x44, 0x52], 12); // "IHDR"
  const dv = new DataView(bytes.buffer);
  dv.setUint32(16, width);
  dv.setUint32(20, height);
  let bin = "";
  bytes.forEach((b) => (bin += String.fromCharCode(b)));
  return btoa(bin);
}

interface FakeStation {
  queue: { frame_id: string; score: number }[];
  posts: { url: string; body: Record<string, unknown> }[];
  classes: string[];
  failPostsRemaining?: number;
}

function makeFetch(station: FakeStation): typeof fetch {
  return (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    if (url.endsWith("/queue/next")) {
      const item = station.queue[0];
      if (!item) return new Response("empty", { status: 404 });
      return Response.json({
        frame_id: item.frame_id,
        score: item.score,
        received_at: 1.0,
        image_base64: fakePng(128, 128),
      });
    }
    if (url.endsWith("/mission/status")) {
      return Response.json({
        pending: station.queue.length,
        reviewed: 0,
        head_version: 1,
        classes: station.classes,
        novel_shots: 0,
        shots_per_class: {},
      });
    }
    if (url.endsWith("/decision")) {
      if (station.failPostsRemaining && station.failPostsRemaining > 0) {
        station.failPostsRemaining -= 1;
        throw new TypeError("network down");
      }
      const body = JSON.parse(String(init?.body)) as Record<string, unknown>;
      station.posts.push({ url, body });
      station.queue = station.queue.filter((q) => q.frame_id !== body.frame_id);
      return Response.json({ status: "ok" });
    }
    return new Response("not found", { status: 404 });
  }) as typeof fetch;
}

const nullSocketFactory: SocketFactory = () => {
  const sock: SocketLike = { onopen: null, onclose: null, onmessage: null, close() {} };
  setTimeout(() => sock.onopen?.(), 0);
  return sock;
};

function key(doc: Document, k: string): void {
  doc.dispatchEvent(new KeyboardEvent("keydown", { key: k, bubbles: true }));
}

function mouse(el: HTMLElement, type: string, x: number, y: number): void {
  el.dispatchEvent(new MouseEvent(type, { clientX: x, clientY: y, bubbles: true }));
}

async function settle(): Promise<void> {
  for (let i = 0; i < 10; i++) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

describe("scripted review session", () => {
  let root: HTMLElement;

  beforeEach(() => {
    document.body.innerHTML = "";
    root = document.createElement("div");
    document.body.appendChild(root);
  });

  it("N on one frame, one drawn box on another: exactly two POSTs", async () => {
    const station: FakeStation = {
      queue: [
        { frame_id: "frame-a", score: 0.91 },
        { frame_id: "frame-b", score: 0.84 },
      ],
      posts: [],
      classes: ["disk", "slab", "cross"],
    };
    const client = new StationClient("http://station", makeFetch(station), async () => {});
    const handles = await startOperatorConsole(root, {
      baseUrl: "http://station",
      client,
      socketFactory: nullSocketFactory,
    });
    const { img, overlay, submitBtn, classInput, classForm } = handles.elements;

    expect(handles.controller.current?.frame_id).toBe("frame-a");

    // frame-a: not interesting
    key(document, "n");
    await settle();
    expect(station.posts.length).toBe(1);
    expect(station.posts[0]!.body).toEqual({
      frame_id: "frame-a",
      decision: "uninteresting",
      boxes: [],
    });
    expect(handles.controller.current?.frame_id).toBe("frame-b");

    // frame-b: interesting; display is 2x-scaled and offset
    key(document, "i");
    await settle();
    expect(overlay.style.display).toBe("block");
    (img as HTMLImageElement).getBoundingClientRect = () =>
      ({ left: 10, top: 20, width: 256, height: 256, right: 266, bottom: 276,
         x: 10, y: 20, toJSON: () => ({}) }) as DOMRect;

    mouse(overlay, "mousedown", 10 + 2 * 20, 20 + 2 * 30);
    mouse(overlay, "mouseup", 10 + 2 * 90, 20 + 2 * 110);
    await settle();
    expect(classForm.style.display).toBe("block");
    (classInput as HTMLInputElement).value = "widget";
    classForm.dispatchEvent(new Event("submit", { bubbles: true, cancelable: true }));
    await settle();

    expect((submitBtn as HTMLButtonElement).disabled).toBe(false);
    submitBtn.click();
    await settle();

    expect(station.posts.length).toBe(2);
    expect(station.posts[1]!.body).toEqual({
      frame_id: "frame-b",
      decision: "interesting",
      boxes: [{ x_min: 20, y_min: 30, x_max: 90, y_max: 110, class: "widget" }],
    });
    expect(handles.controller.current).toBeNull(); // queue drained
    handles.dispose();
  });

  it("reversed drags on a scaled display still produce valid boxes", async () => {
    for (const [sx, sy] of [[0.5, 0.5], [2, 2], [3, 1.5]] as const) {
      const station: FakeStation = {
        queue: [{ frame_id: "f", score: 0.8 }],
        posts: [],
        classes: [],
      };
      const client = new StationClient("http://s", makeFetch(station), async () => {});
      document.body.innerHTML = "";
      root = document.createElement("div");
      document.body.appendChild(root);
      const handles = await startOperatorConsole(root, {
        baseUrl: "http://s",
        client,
        socketFactory: nullSocketFactory,
      });
      const { img, overlay, classInput, classForm } = handles.elements;
      key(document, "i");
      await settle();
      (img as HTMLImageElement).getBoundingClientRect = () =>
        ({ left: 5, top: 7, width: 128 * sx, height: 128 * sy, right: 0, bottom: 0,
           x: 5, y: 7, toJSON: () => ({}) }) as DOMRect;
      // bottom-right to top-left drag
      mouse(overlay, "mousedown", 5 + 100 * sx, 7 + 120 * sy);
      mouse(overlay, "mouseup", 5 + 30 * sx, 7 + 40 * sy);
      await settle();
      (classInput as HTMLInputElement).value = "thing";
      classForm.dispatchEvent(new Event("submit", { bubbles: true, cancelable: true }));
      await settle();
      const box = handles.controller.draft!.boxes[0]!;
      expect(box.x_min).toBeLessThan(box.x_max);
      expect(box.y_min).toBeLessThan(box.y_max);
      expect(box.x_min).toBeCloseTo(30, 5);
      expect(box.y_min).toBeCloseTo(40, 5);
      expect(box.x_max).toBeCloseTo(100, 5);
      expect(box.y_max).toBeCloseTo(120, 5);
      handles.dispose();
    }
  });

  it("degenerate drags never enable submit", async () => {
    const station: FakeStation = {
      queue: [{ frame_id: "f", score: 0.8 }],
      posts: [],
      classes: [],
    };
    const client = new StationClient("http://s", makeFetch(station), async () => {});
    const handles = await startOperatorConsole(root, {
      baseUrl: "http://s",
      client,
      socketFactory: nullSocketFactory,
    });
    const { img, overlay, submitBtn } = handles.elements;
    key(document, "i");
    await settle();
    (img as HTMLImageElement).getBoundingClientRect = () =>
      ({ left: 0, top: 0, width: 128, height: 128, right: 128, bottom: 128,
         x: 0, y: 0, toJSON: () => ({}) }) as DOMRect;
    mouse(overlay, "mousedown", 50, 60);
    mouse(overlay, "mouseup", 50, 60); // zero-area drag
    await settle();
    expect(handles.controller.draft!.boxes.length).toBe(0);
    expect((submitBtn as HTMLButtonElement).disabled).toBe(true);
    handles.dispose();
  });

  it("interesting without boxes cannot be submitted", async () => {
    const station: FakeStation = {
      queue: [{ frame_id: "f", score: 0.8 }],
      posts: [],
      classes: [],
    };
    const client = new StationClient("http://s", makeFetch(station), async () => {});
    const handles = await startOperatorConsole(root, {
      baseUrl: "http://s",
      client,
      socketFactory: nullSocketFactory,
    });
    key(document, "i");
    await settle();
    await handles.controller.submitDraft(); // no boxes: must refuse to post
    expect(station.posts.length).toBe(0);
    handles.dispose();
  });

  it("every POST corresponds to one user action (no doubles while posting)", async () => {
    const station: FakeStation = {
      queue: [{ frame_id: "only", score: 0.9 }],
      posts: [],
      classes: [],
    };
    const base = makeFetch(station);
    let resolveGate: (() => void) | null = null;
    const slowFetch = (async (input: RequestInfo | URL, init?: RequestInit) => {
      if (String(input).endsWith("/decision")) {
        await new Promise<void>((resolve) => (resolveGate = resolve));
      }
      return base(input, init);
    }) as typeof fetch;
    const client = new StationClient("http://s", slowFetch, async () => {});
    const handles = await startOperatorConsole(root, {
      baseUrl: "http://s",
      client,
      socketFactory: nullSocketFactory,
    });
    key(document, "n");
    await settle();
    key(document, "n"); // keypress while the first POST is in flight
    key(document, "n");
    await settle();
    resolveGate!();
    await settle();
    expect(station.posts.length).toBe(1);
    handles.dispose();
  });

  it("network failure retries with backoff and indicates unsent state", async () => {
    const station: FakeStation = {
      queue: [{ frame_id: "f", score: 0.8 }],
      posts: [],
      classes: [],
      failPostsRemaining: 2,
    };
    const sleeps: number[] = [];
    const client = new StationClient("http://s", makeFetch(station), async (ms) => {
      sleeps.push(ms);
    });
    const handles = await startOperatorConsole(root, {
      baseUrl: "http://s",
      client,
      socketFactory: nullSocketFactory,
    });
    const badge = root.querySelector<HTMLElement>("#unsent-badge")!;
    key(document, "n");
    // the badge turns on synchronously when the decision starts posting
    expect(badge.style.display).toBe("inline");
    await settle();
    expect(station.posts.length).toBe(1);
    expect(sleeps).toEqual([500, 1000]); // exponential backoff
    expect(badge.style.display).toBe("none");
    handles.dispose();
  });
});

describe("pngDimensions", () => {
  it("reads the IHDR size", () => {
    expect(pngDimensions(fakePng(128, 96))).toEqual({ width: 128, height: 96 });
  });

  it("returns null for non-PNG payloads", () => {
    expect(pngDimensions(btoa("definitely not a png"))).toBeNull();
  });
});
