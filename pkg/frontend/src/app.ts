// Browser wiring: pointer events feed the controller, the controller's
// onChange redraws the canvas.

import { ApiClient } from "./api.js";
import { canvasToCourt, courtToCanvas, type ViewTransform } from "./court.js";
import { CourtController } from "./controller.js";
import { DimensionMismatch, drawErrorOverlay, drawHeatmap } from "./heatmap.js";
import type { MarkerId } from "./state.js";

const TRANSFORM: ViewTransform = { pxPerMeter: 60, padPx: 20 };

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function startApp(): void {
  const params = new URLSearchParams(window.location.search);
  const api = new ApiClient(params.get("service") ?? "");
  const canvas = el<HTMLCanvasElement>("court");
  const ctx = canvas.getContext("2d")!;
  const banner = el<HTMLDivElement>("banner");
  const noticesEl = el<HTMLDivElement>("notices");
  const picker = el<HTMLSelectElement>("sample-picker");
  const customP = el<HTMLInputElement>("custom-p");

  canvas.width = TRANSFORM.padPx * 2 + 13.4 * TRANSFORM.pxPerMeter;
  canvas.height = TRANSFORM.padPx * 2 + 6.1 * TRANSFORM.pxPerMeter;

  const controller = new CourtController(api, { onChange: render });
  let dragging: MarkerId | null = null;

  function render(): void {
    const state = controller.state;
    ctx.fillStyle = "#f8f8f8";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    if (state.heatmap && state.grid) {
      try {
        drawHeatmap(ctx, state.heatmap, state.grid, TRANSFORM);
      } catch (e) {
        if (e instanceof DimensionMismatch) drawErrorOverlay(ctx, e.message, TRANSFORM);
        else throw e;
      }
    }
    ctx.strokeStyle = "#333";
    ctx.strokeRect(TRANSFORM.padPx, TRANSFORM.padPx, 13.4 * TRANSFORM.pxPerMeter, 6.1 * TRANSFORM.pxPerMeter);
    const netX = TRANSFORM.padPx + 6.7 * TRANSFORM.pxPerMeter;
    ctx.beginPath();
    ctx.moveTo(netX, TRANSFORM.padPx);
    ctx.lineTo(netX, TRANSFORM.padPx + 6.1 * TRANSFORM.pxPerMeter);
    ctx.stroke();

    const dot = (id: MarkerId, color: string, radius: number) => {
      const m = state.markers[id];
      if (!m) return;
      const px = courtToCanvas(m, TRANSFORM);
      ctx.beginPath();
      ctx.arc(px.x, px.y, radius, 0, 2 * Math.PI);
      ctx.fillStyle = color;
      ctx.fill();
      ctx.strokeStyle = "#222";
      ctx.stroke();
    };
    dot("player0", "#ff9900", 8);
    dot("player1", "#ffcc44", 8);
    dot("shuttle", "#44cc44", 6);
    for (const rec of controller.recommendations) {
      const px = courtToCanvas({ x: rec.x, y: rec.y }, TRANSFORM);
      ctx.beginPath();
      ctx.arc(px.x, px.y, 9, 0, 2 * Math.PI);
      ctx.strokeStyle = rec.color;
      ctx.lineWidth = 3;
      ctx.stroke();
      ctx.lineWidth = 1;
    }
    canvas.title = controller.recommendations.map((r) => r.hoverText).join("\n");
    noticesEl.textContent = controller.notices.map((n) => n.message).join(" | ");
    banner.textContent = state.banner ?? "";
    banner.style.display = state.banner ? "block" : "none";
  }

  function activeLevels(): number[] {
    const levels: number[] = [];
    if (el<HTMLInputElement>("level-075").checked) levels.push(0.75);
    if (el<HTMLInputElement>("level-095").checked) levels.push(0.95);
    const custom = parseFloat(customP.value);
    if (!Number.isNaN(custom) && custom > 0 && custom < 1) levels.push(custom);
    return levels.length ? levels : [0.75, 0.95];
  }

  function markerAt(pt: { x: number; y: number }): MarkerId | null {
    for (const id of ["shuttle", "player1", "player0"] as MarkerId[]) {
      const m = controller.state.markers[id];
      if (!m) continue;
      const px = courtToCanvas(m, TRANSFORM);
      if (Math.hypot(px.x - pt.x, px.y - pt.y) <= 12) return id;
    }
    return null;
  }

  canvas.addEventListener("pointerdown", (ev) => {
    dragging = markerAt({ x: ev.offsetX, y: ev.offsetY });
    if (dragging) canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    controller.onDragMove(dragging, canvasToCourt({ x: ev.offsetX, y: ev.offsetY }, TRANSFORM));
  });
  canvas.addEventListener("pointerup", () => {
    if (!dragging) return;
    const wasShuttle = dragging === "shuttle";
    dragging = null;
    controller.onDragRelease();
    if (wasShuttle) void controller.refreshRecommendations(activeLevels());
  });

  el<HTMLButtonElement>("recommend-btn").addEventListener("click", () => {
    void controller.refreshRecommendations(activeLevels());
  });

  async function loadSelected(): Promise<void> {
    const id = picker.value;
    if (!id) return;
    const record = await api.sampleRecord(id);
    const resp = await api.infer(record);
    controller.load(record, resp.grid);
    controller.state = { ...controller.state, heatmap: resp.map, checkpointId: resp.checkpoint_id };
    render();
  }

  picker.addEventListener("change", () => void loadSelected());

  void (async () => {
    try {
      const { samples } = await api.samples();
      for (const s of samples) {
        const opt = document.createElement("option");
        opt.value = s.sample_id;
        opt.textContent = `${s.sample_id} (${s.label ? "hit" : "drop"}, side ${s.side})`;
        picker.appendChild(opt);
      }
      if (samples.length) {
        picker.value = samples[0].sample_id;
        await loadSelected();
      }
    } catch (e) {
      banner.textContent = `cannot reach service: ${String(e)}`;
      banner.style.display = "block";
    }
  })();

  render();
}

startApp();
