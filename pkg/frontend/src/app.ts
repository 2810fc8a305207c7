import { StationClient } from "./api.js";
import { makeMapper, Point } from "./boxes.js";
import { ReviewController, ReviewView } from "./review.js";
import { EventSocket, SocketFactory, StatusPanel } from "./status.js";
import { ImageBox, ReviewItem } from "./types.js";

// Width/height from a base64 PNG's IHDR chunk; avoids waiting for image
// decode (and works in DOM test environments that never rasterize).
export function pngDimensions(b64: string): { width: number; height: number } | null {
  const bin = atob(b64.slice(0, 48));
  if (bin.length < 24 || bin.charCodeAt(1) !== 0x50 || bin.charCodeAt(2) !== 0x4e) {
    return null; // not a PNG
  }
  const be = (o: number) =>
    (bin.charCodeAt(o) << 24) |
    (bin.charCodeAt(o + 1) << 16) |
    (bin.charCodeAt(o + 2) << 8) |
    bin.charCodeAt(o + 3);
  return { width: be(16), height: be(20) };
}

export interface ConsoleHandles {
  controller: ReviewController;
  panel: StatusPanel;
  socket: EventSocket;
  elements: Record<string, HTMLElement>;
  dispose: () => void;
}

export interface ConsoleOptions {
  baseUrl?: string;
  client?: StationClient;
  socketFactory?: SocketFactory;
}

export function mountOperatorConsole(
  root: HTMLElement,
  opts: ConsoleOptions = {},
): ConsoleHandles {
  const doc = root.ownerDocument;
  const baseUrl = opts.baseUrl ?? "";
  const client = opts.client ?? new StationClient(baseUrl);

  root.innerHTML = `
    <div class="viewer" style="position:relative">
      <img id="frame-image" alt="frame under review">
      <div id="overlay" style="position:absolute;inset:0;display:none"></div>
      <form id="class-form" style="display:none">
        <input id="class-input" list="class-list" placeholder="object class">
        <datalist id="class-list"></datalist>
      </form>
    </div>
    <div class="controls">
      <span id="frame-label">queue empty</span>
      <button id="submit-draft" disabled>submit annotation</button>
      <span id="unsent-badge" style="display:none">decision unsent, retrying</span>
      <span id="error-box"></span>
      <span class="hint">N = not interesting, I = interesting (drag boxes)</span>
    </div>
    <div class="status">
      queue <b id="queue-depth">0</b> |
      head <b id="head-version">1</b> |
      shots <span id="shots-per-class"></span> |
      last sync <span id="last-sync">never</span>
      <span id="stale-badge" style="display:none">STALE</span>
    </div>
  `;

  const el = (id: string) => root.querySelector<HTMLElement>(`#${id}`)!;
  const img = el("frame-image") as HTMLImageElement;
  const overlay = el("overlay");
  const classForm = el("class-form") as HTMLFormElement;
  const classInput = el("class-input") as HTMLInputElement;
  const classList = el("class-list");
  const submitBtn = el("submit-draft") as HTMLButtonElement;

  let imageSize = { width: 1, height: 1 };
  let classPromptResolve: ((name: string | null) => void) | null = null;

  const view: ReviewView = {
    showItem(item: ReviewItem | null) {
      if (item === null) {
        img.removeAttribute("src");
        el("frame-label").textContent = "queue empty";
        return;
      }
      imageSize = pngDimensions(item.image_base64) ?? {
        width: img.naturalWidth || 1,
        height: img.naturalHeight || 1,
      };
      img.src = `data:image/png;base64,${item.image_base64}`;
      el("frame-label").textContent =
        `${item.frame_id} (score ${item.score.toFixed(2)})`;
    },
    showDraft(boxes: ImageBox[]) {
      overlay.querySelectorAll(".draft-box").forEach((n) => n.remove());
      const rect = img.getBoundingClientRect();
      const sx = rect.width > 0 ? rect.width / imageSize.width : 1;
      const sy = rect.height > 0 ? rect.height / imageSize.height : 1;
      for (const box of boxes) {
        const div = doc.createElement("div");
        div.className = "draft-box";
        div.title = box.class;
        div.style.cssText =
          `position:absolute;border:2px solid #ff5050;` +
          `left:${box.x_min * sx}px;top:${box.y_min * sy}px;` +
          `width:${(box.x_max - box.x_min) * sx}px;` +
          `height:${(box.y_max - box.y_min) * sy}px`;
        overlay.appendChild(div);
      }
    },
    setAnnotating(on: boolean) {
      overlay.style.display = on ? "block" : "none";
    },
    setSubmitEnabled(on: boolean) {
      submitBtn.disabled = !on;
    },
    setUnsent(on: boolean) {
      el("unsent-badge").style.display = on ? "inline" : "none";
    },
    promptClassName(existing: string[]): Promise<string | null> {
      classList.innerHTML = "";
      for (const name of existing) {
        const opt = doc.createElement("option");
        opt.value = name;
        classList.appendChild(opt);
      }
      classInput.value = "";
      classForm.style.display = "block";
      classInput.focus();
      return new Promise((resolve) => {
        classPromptResolve = (name) => {
          classForm.style.display = "none";
          classPromptResolve = null;
          resolve(name);
        };
      });
    },
    showError(message: string) {
      el("error-box").textContent = message;
    },
  };

  const controller = new ReviewController(client, view);

  classForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    classPromptResolve?.(classInput.value);
  });
  classInput.addEventListener("keydown", (ev) => {
    if (ev.key === "Escape") {
      classPromptResolve?.(null);
    }
    ev.stopPropagation(); // typing must not trigger review hotkeys
  });

  const onKeydown = (ev: KeyboardEvent) => {
    if (classPromptResolve !== null) return; // naming a box
    void controller.handleKey(ev.key);
  };
  doc.addEventListener("keydown", onKeydown);

  let dragStart: Point | null = null;
  overlay.addEventListener("mousedown", (ev) => {
    dragStart = { x: (ev as MouseEvent).clientX, y: (ev as MouseEvent).clientY };
  });
  overlay.addEventListener("mouseup", (ev) => {
    if (dragStart === null) return;
    const end = { x: (ev as MouseEvent).clientX, y: (ev as MouseEvent).clientY };
    const rect = img.getBoundingClientRect();
    const mapper = makeMapper(
      { left: rect.left, top: rect.top, width: rect.width, height: rect.height },
      imageSize,
    );
    const a = mapper.toImage(dragStart);
    const b = mapper.toImage(end);
    dragStart = null;
    void controller.finishBox(a, b);
  });

  submitBtn.addEventListener("click", () => {
    void controller.submitDraft();
  });

  const panel = new StatusPanel();
  panel.onRender((state) => {
    el("queue-depth").textContent = String(state.pending);
    el("head-version").textContent = String(state.headVersion);
    el("shots-per-class").textContent =
      Object.entries(state.shotsPerClass)
        .map(([name, count]) => `${name}:${count}`)
        .join(" ") || "none";
    el("last-sync").textContent =
      state.lastSync === null ? "never" : `t=${state.lastSync.toFixed(1)}`;
    el("stale-badge").style.display = state.stale ? "inline" : "none";
  });

  const wsUrl = baseUrl.replace(/^http/, "ws") + "/events";
  const factory: SocketFactory =
    opts.socketFactory ?? ((url) => new WebSocket(url) as unknown as never);
  const socket = new EventSocket(wsUrl, factory);
  socket.onEvent((event) => {
    panel.apply(event);
    if (event.kind === "capacity_error") {
      // surfaced verbatim so the operator knows the class was dropped
      view.showError(`capacity_error: ${String(event.class_name)}`);
    }
  });
  socket.onConnection((up) => panel.setConnected(up));

  const dispose = () => {
    doc.removeEventListener("keydown", onKeydown);
    socket.close();
  };

  return {
    controller,
    panel,
    socket,
    elements: { img, overlay, submitBtn, classInput, classForm },
    dispose,
  };
}

export async function startOperatorConsole(
  root: HTMLElement,
  opts: ConsoleOptions = {},
): Promise<ConsoleHandles> {
  const handles = mountOperatorConsole(root, opts);
  handles.socket.connect();
  const client = opts.client ?? new StationClient(opts.baseUrl ?? "");
  try {
    handles.panel.seed(await client.status());
  } catch {
    // panel fills in from the event stream
  }
  await handles.controller.start();
  return handles;
}
