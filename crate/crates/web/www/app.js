// Expects the wasm-bindgen output (target "web") in ./pkg; see the README.
import init, { simulate_surface, fit_forecast, hosvd_components } from "./pkg/bpmf_web.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const num = (id) => Number(document.getElementById(id).value);

function show(id, text, isError = false) {
  const el = document.getElementById(id);
  el.textContent = text;
  el.className = isError ? "error" : "note";
}

function call(fn, msgId) {
  const out = JSON.parse(fn());
  if (out.error) {
    show(msgId, out.error, true);
    return null;
  }
  return out;
}

function viridisLike(t) {
  const r = Math.round(255 * Math.min(1, Math.max(0, 1.5 * t - 0.3)));
  const g = Math.round(255 * Math.min(1, Math.max(0, 1.2 * t)));
  const b = Math.round(255 * Math.min(1, Math.max(0, 0.9 - t)));
  return `rgb(${r},${g},${b})`;
}

function heatmap(ctx, grid, x0, y0, w, h) {
  const flat = grid.flat();
  const lo = Math.min(...flat);
  const hi = Math.max(...flat);
  const cw = w / grid[0].length;
  const ch = h / grid.length;
  grid.forEach((row, i) =>
    row.forEach((v, j) => {
      ctx.fillStyle = viridisLike(hi > lo ? (v - lo) / (hi - lo) : 0.5);
      ctx.fillRect(x0 + j * cw, y0 + i * ch, Math.ceil(cw), Math.ceil(ch));
    }),
  );
}

function scales(xs, ys, x0, y0, w, h) {
  const [xl, xh] = [Math.min(...xs), Math.max(...xs)];
  const [yl, yh] = [Math.min(...ys), Math.max(...ys)];
  const sx = (x) => x0 + ((x - xl) / (xh - xl || 1)) * w;
  const sy = (y) => y0 + h - ((y - yl) / (yh - yl || 1)) * h;
  return { sx, sy, yl, yh };
}

function runSurface() {
  const out = call(
    () => simulate_surface(num("s-n"), num("s-t"), num("s-a"), num("s-q"), num("s-r"), BigInt(num("s-seed"))),
    "s-msg",
  );
  if (!out) return;
  const pop = Math.min(num("s-pop"), out.log_counts.length - 1);
  const ctx = document.getElementById("s-canvas").getContext("2d");
  ctx.clearRect(0, 0, 900, 320);
  heatmap(ctx, out.log_counts[pop], 10, 10, 430, 300);
  heatmap(ctx, out.signal[pop], 460, 10, 430, 300);
  show("s-msg", `population ${out.labels.populations[pop]}: sigma2 = ${out.sigma2[pop].toFixed(3)}`);
}

function runForecast() {
  show("f-msg", "sampling...");
  const out = call(
    () => fit_forecast(BigInt(num("f-seed")), num("f-iter"), num("f-h"), num("f-pop")),
    "f-msg",
  );
  if (!out) return;
  const years = out.labels.years;
  const allY = out.observed_totals.concat(out.fan.flat());
  const allX = years.concat(out.fan_years);
  const { sx, sy } = scales(allX, allY, 40, 10, 840, 290);
  const ctx = document.getElementById("f-canvas").getContext("2d");
  ctx.clearRect(0, 0, 900, 320);
  const band = (lo, hi, color) => {
    ctx.fillStyle = color;
    ctx.beginPath();
    out.fan_years.forEach((y, k) => ctx.lineTo(sx(y), sy(out.fan[k][hi])));
    [...out.fan_years].reverse().forEach((y, k) => ctx.lineTo(sx(y), sy(out.fan[out.fan.length - 1 - k][lo])));
    ctx.fill();
  };
  band(0, 4, "rgba(31,119,180,0.2)");
  band(1, 3, "rgba(31,119,180,0.4)");
  ctx.strokeStyle = COLORS[0];
  ctx.beginPath();
  out.fan_years.forEach((y, k) => ctx.lineTo(sx(y), sy(out.fan[k][2])));
  ctx.stroke();
  ctx.fillStyle = "#222";
  years.forEach((y, k) => {
    ctx.beginPath();
    ctx.arc(sx(y), sy(out.observed_totals[k]), 3, 0, 2 * Math.PI);
    ctx.fill();
  });
  const m = out.in_sample;
  const corr = m.corr === null ? "n/a" : m.corr.toFixed(3);
  show("f-msg", `${out.draws} retained draws; in-sample RMSE ${m.rmse.toFixed(3)}, correlation ${corr}`);
}

function lines(ctx, comps, x0, w) {
  const n = comps[0].length;
  const xs = [...Array(n).keys()];
  const { sx, sy } = scales(xs, comps.flat(), x0, 10, w, 290);
  comps.forEach((c, k) => {
    ctx.strokeStyle = COLORS[k % COLORS.length];
    ctx.beginPath();
    c.forEach((v, j) => ctx.lineTo(sx(j), sy(v)));
    ctx.stroke();
  });
}

function runHosvd() {
  const out = call(() => hosvd_components(BigInt(num("h-seed")), num("h-q"), num("h-r")), "h-msg");
  if (!out) return;
  const ctx = document.getElementById("h-canvas").getContext("2d");
  ctx.clearRect(0, 0, 900, 320);
  lines(ctx, out.time_components, 20, 410);
  lines(ctx, out.age_components, 470, 410);
  const pct = (s) => s.map((v) => (100 * v).toFixed(1) + "%").join(", ");
  show("h-msg", `time shares: ${pct(out.time_shares)}; age shares: ${pct(out.age_shares)}`);
}

await init();
document.getElementById("s-run").onclick = runSurface;
document.getElementById("f-run").onclick = runForecast;
document.getElementById("h-run").onclick = runHosvd;
runSurface();
runHosvd();
