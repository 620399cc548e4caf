// Static demo driver: loads the wasm module built from crates/qtb-wasm
// (see README for the build command) and wires three interactive panels.

import init, { envelopeCurves, boundProcess, frontierSurface } from "./pkg/qtb_wasm.js";

const TAUS = [0.25, 0.5, 0.75];

function slider(id, fmt, onChange) {
  const input = document.getElementById(id);
  const out = document.getElementById(`${id}-out`);
  const update = () => {
    out.textContent = fmt(parseFloat(input.value));
    onChange();
  };
  input.addEventListener("input", update);
  return () => parseFloat(input.value);
}

function clearCanvas(ctx) {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
}

// Map data coordinates to pixels with a small margin.
function scaler(ctx, x0, x1, y0, y1) {
  const mL = 46, mR = 12, mT = 10, mB = 28;
  const w = ctx.canvas.width - mL - mR;
  const h = ctx.canvas.height - mT - mB;
  return {
    x: (v) => mL + ((v - x0) / (x1 - x0)) * w,
    y: (v) => mT + (1 - (v - y0) / (y1 - y0)) * h,
    frame() {
      ctx.strokeStyle = "#b8c2cc";
      ctx.lineWidth = 1;
      ctx.strokeRect(mL, mT, w, h);
      ctx.fillStyle = "#51606e";
      ctx.font = "11px system-ui";
      for (let i = 0; i <= 4; i++) {
        const vx = x0 + (i / 4) * (x1 - x0);
        const vy = y0 + (i / 4) * (y1 - y0);
        ctx.fillText(vx.toFixed(2), this.x(vx) - 10, mT + h + 16);
        ctx.fillText(vy.toFixed(2), 8, this.y(vy) + 4);
      }
    },
  };
}

function polyline(ctx, sc, xs, ys, color, dash = []) {
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.8;
  ctx.setLineDash(dash);
  ctx.beginPath();
  xs.forEach((x, i) => {
    const px = sc.x(x);
    const py = sc.y(ys[i]);
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
  ctx.setLineDash([]);
}

function band(ctx, sc, xs, lo, hi, fill) {
  ctx.fillStyle = fill;
  ctx.beginPath();
  xs.forEach((x, i) => {
    const px = sc.x(x);
    if (i === 0) ctx.moveTo(px, sc.y(lo[i]));
    else ctx.lineTo(px, sc.y(lo[i]));
  });
  for (let i = xs.length - 1; i >= 0; i--) {
    ctx.lineTo(sc.x(xs[i]), sc.y(hi[i]));
  }
  ctx.closePath();
  ctx.fill();
}

function setupEnvelopePanel() {
  const ctx = document.getElementById("env-canvas").getContext("2d");
  let gamma, lambda, e;
  const draw = () => {
    const data = envelopeCurves(gamma(), lambda(), e(), 241);
    clearCanvas(ctx);
    const sc = scaler(ctx, 0, 1, 0, 1);
    sc.frame();
    band(ctx, sc, data.p, data.nested_lower, data.nested_upper, "rgba(31,119,180,0.12)");
    polyline(ctx, sc, data.p, data.nested_lower, "#1f77b4");
    polyline(ctx, sc, data.p, data.nested_upper, "#1f77b4");
    polyline(ctx, sc, data.p, data.product_lower, "#d62728", [6, 4]);
    polyline(ctx, sc, data.p, data.product_upper, "#d62728", [6, 4]);
    polyline(ctx, sc, data.p, data.p, "#9aa5af", [2, 4]);
  };
  gamma = slider("env-gamma", (v) => v.toFixed(2), draw);
  lambda = slider("env-lambda", (v) => v.toFixed(2), draw);
  e = slider("env-e", (v) => v.toFixed(2), draw);
  draw();
}

function setupBoundPanel() {
  const ctx = document.getElementById("bp-canvas").getContext("2d");
  const tbody = document.querySelector("#hull-table tbody");
  let gamma, lambda;
  const draw = () => {
    const data = boundProcess(gamma(), lambda(), new Float64Array(TAUS));
    clearCanvas(ctx);
    const y0 = data.y[0];
    const y1 = data.y[data.y.length - 1];
    const sc = scaler(ctx, y0, y1, 0, 1);
    sc.frame();
    band(ctx, sc, data.y, data.arm0_lower, data.arm0_upper, "rgba(214,39,40,0.14)");
    band(ctx, sc, data.y, data.arm1_lower, data.arm1_upper, "rgba(31,119,180,0.14)");
    polyline(ctx, sc, data.y, data.arm0_lower, "#d62728");
    polyline(ctx, sc, data.y, data.arm0_upper, "#d62728");
    polyline(ctx, sc, data.y, data.arm1_lower, "#1f77b4");
    polyline(ctx, sc, data.y, data.arm1_upper, "#1f77b4");
    tbody.innerHTML = data.hulls
      .map(
        (h) =>
          `<tr><td>${h.tau.toFixed(2)}</td><td>${h.delta_lo.toFixed(3)}</td>` +
          `<td>${h.delta_hi.toFixed(3)}</td><td>${h.kappa.toFixed(3)}</td></tr>`
      )
      .join("");
  };
  gamma = slider("bp-gamma", (v) => v.toFixed(2), draw);
  lambda = slider("bp-lambda", (v) => v.toFixed(2), draw);
  draw();
}

function setupFrontierPanel() {
  const ctx = document.getElementById("fr-canvas").getContext("2d");
  let tau, gmax, lmax;
  const draw = () => {
    const data = frontierSurface(gmax(), lmax(), 41, tau());
    clearCanvas(ctx);
    const sc = scaler(ctx, 1, gmax(), 1, lmax());
    const [ng, nl] = data.mesh;
    const kmax = Math.max(...data.kappa.map(Math.abs), 1e-9);
    const cellW = (sc.x(gmax()) - sc.x(1)) / (ng - 1);
    const cellH = (sc.y(1) - sc.y(lmax())) / (nl - 1);
    for (let i = 0; i < ng; i++) {
      for (let j = 0; j < nl; j++) {
        const k = data.kappa[i * nl + j];
        const t = Math.min(Math.abs(k) / kmax, 1);
        // Refuted region in warm tones, non-refuted in cool tones.
        ctx.fillStyle =
          k < 0
            ? `rgba(214,39,40,${0.15 + 0.55 * t})`
            : `rgba(31,119,180,${0.15 + 0.55 * t})`;
        ctx.fillRect(
          sc.x(data.gammas[i]) - cellW / 2,
          sc.y(data.lambdas[j]) - cellH / 2,
          cellW + 0.5,
          cellH + 0.5
        );
      }
    }
    ctx.fillStyle = "#ffffff";
    for (const [g, l] of data.zero_level) {
      ctx.beginPath();
      ctx.arc(sc.x(g), sc.y(l), 2.2, 0, 2 * Math.PI);
      ctx.fill();
    }
    sc.frame();
  };
  tau = slider("fr-tau", (v) => v.toFixed(2), draw);
  gmax = slider("fr-gmax", (v) => v.toFixed(1), draw);
  lmax = slider("fr-lmax", (v) => v.toFixed(1), draw);
  draw();
}

init().then(() => {
  setupEnvelopePanel();
  setupBoundPanel();
  setupFrontierPanel();
});
