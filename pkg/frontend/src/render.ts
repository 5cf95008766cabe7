// Canvas painter for the draw-command list. All geometry arrives in world
// meters; the view maps it to pixels with y up.

import type { DrawCommand } from "./scene.js";

export interface View {
  scalePxPerM: number;
  originPx: [number, number]; // canvas pixel of world (0, 0)
}

export function worldToCanvas(view: View, p: [number, number]): [number, number] {
  return [view.originPx[0] + p[0] * view.scalePxPerM,
          view.originPx[1] - p[1] * view.scalePxPerM];
}

export function defaultView(canvas: { width: number; height: number }, reach: number): View {
  const margin = 40;
  const scale = (Math.min(canvas.width, canvas.height) - 2 * margin) / (2 * reach);
  return {
    scalePxPerM: scale,
    originPx: [canvas.width * 0.35, canvas.height * 0.62],
  };
}

export function paint(ctx: CanvasRenderingContext2D, view: View,
                      commands: DrawCommand[]): void {
  const canvas = ctx.canvas;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#14161a";
  ctx.fillRect(0, 0, canvas.width, canvas.height);

  let bannerRow = 0;
  for (const cmd of commands) {
    switch (cmd.kind) {
      case "segment": {
        const a = worldToCanvas(view, cmd.from);
        const b = worldToCanvas(view, cmd.to);
        ctx.strokeStyle = cmd.color;
        ctx.lineWidth = cmd.width;
        ctx.beginPath();
        ctx.moveTo(a[0], a[1]);
        ctx.lineTo(b[0], b[1]);
        ctx.stroke();
        break;
      }
      case "circle": {
        const c = worldToCanvas(view, cmd.center);
        ctx.globalAlpha = cmd.alpha;
        ctx.beginPath();
        ctx.arc(c[0], c[1], cmd.radius * view.scalePxPerM, 0, 2 * Math.PI);
        if (cmd.fill) {
          ctx.fillStyle = cmd.color;
          ctx.fill();
        } else {
          ctx.strokeStyle = cmd.color;
          ctx.lineWidth = 2;
          ctx.stroke();
        }
        ctx.globalAlpha = 1;
        break;
      }
      case "polyline": {
        ctx.strokeStyle = cmd.color;
        ctx.lineWidth = cmd.width;
        ctx.setLineDash(cmd.dashed ? [4, 4] : []);
        ctx.beginPath();
        const first = worldToCanvas(view, cmd.points[0]);
        ctx.moveTo(first[0], first[1]);
        for (const p of cmd.points.slice(1)) {
          const q = worldToCanvas(view, p);
          ctx.lineTo(q[0], q[1]);
        }
        ctx.stroke();
        ctx.setLineDash([]);
        break;
      }
      case "bar": {
        const w = 18;
        const h = canvas.height - 80;
        const x = canvas.width - 40;
        ctx.strokeStyle = "#666";
        ctx.strokeRect(x, 40, w, h);
        ctx.fillStyle = cmd.fraction > 0.8 ? "#d05050" : "#50b070";
        const fh = h * cmd.fraction;
        ctx.fillRect(x, 40 + h - fh, w, fh);
        ctx.fillStyle = "#ccc";
        ctx.font = "11px sans-serif";
        ctx.textAlign = "right";
        ctx.fillText(cmd.label, canvas.width - 8, 28);
        break;
      }
      case "badge": {
        const colors = { ok: "#50b070", warn: "#e0a030", bad: "#d05050" };
        ctx.fillStyle = colors[cmd.level];
        ctx.beginPath();
        ctx.arc(16, 18, 5, 0, 2 * Math.PI);
        ctx.fill();
        ctx.fillStyle = "#ccc";
        ctx.font = "12px sans-serif";
        ctx.textAlign = "left";
        ctx.fillText(cmd.text, 28, 22);
        break;
      }
      case "banner": {
        ctx.fillStyle = "rgba(200, 60, 60, 0.85)";
        const y = 40 + bannerRow * 30;
        ctx.fillRect(canvas.width / 2 - 160, y, 320, 24);
        ctx.fillStyle = "#fff";
        ctx.font = "13px sans-serif";
        ctx.textAlign = "center";
        ctx.fillText(cmd.text, canvas.width / 2, y + 16);
        bannerRow += 1;
        break;
      }
    }
  }
}
