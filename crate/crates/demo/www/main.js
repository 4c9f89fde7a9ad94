import init, { focal_loss_curve, y_t_grid, Example } from "./pkg/vad_demo.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

function drawLoss() {
  const canvas = $("loss");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const gammas = $("gammas").value.split(",").map(Number).filter((g) => g >= 0);
  const xs = y_t_grid(200);
  const yMax = 4.7;
  gammas.forEach((g, i) => {
    const ys = focal_loss_curve(g, 200);
    ctx.strokeStyle = COLORS[i % COLORS.length];
    ctx.beginPath();
    xs.forEach((x, j) => {
      const px = x * (w - 40) + 30;
      const py = h - 20 - (Math.min(ys[j], yMax) / yMax) * (h - 30);
      j ? ctx.lineTo(px, py) : ctx.moveTo(px, py);
    });
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(`γ=${g}`, w - 60, 16 + 14 * i);
  });
  ctx.fillStyle = "#000";
  ctx.fillText("y_t", w - 30, h - 4);
  ctx.fillText("loss", 2, 12);
}

// Renders a rows x cols matrix (row-major, row 0 drawn at the top).
function heatmap(canvas, values, rows, cols, top, lo, hi) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(cols, rows);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const v = Math.max(0, Math.min(1, (values(r, c) - lo) / (hi - lo || 1)));
      const k = 4 * (r * cols + c);
      img.data[k] = 255 * Math.min(1, 2 * v);
      img.data[k + 1] = 255 * v * v;
      img.data[k + 2] = 255 * (1 - v) * 0.6;
      img.data[k + 3] = 255;
    }
  }
  const tmp = new OffscreenCanvas(cols, rows);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, top, canvas.width, canvas.height - top - (top ? 0 : 12));
}

let example = null;

function drawExample() {
  const ex = example;
  const canvas = $("mel");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const mel = ex.log_mel();
  const bands = ex.bands;
  let lo = Infinity, hi = -Infinity;
  for (const v of mel) { if (v > -20) { lo = Math.min(lo, v); hi = Math.max(hi, v); } }
  heatmap(canvas, (r, c) => mel[c * bands + (bands - 1 - r)], bands, ex.frames, 0, lo, hi);
  const labels = ex.labels();
  const x = (t) => (t / ex.frames) * canvas.width;
  ctx.fillStyle = "#2ca02c";
  labels.forEach((l, t) => { if (l) ctx.fillRect(x(t), canvas.height - 10, x(t + 1) - x(t) + 0.5, 10); });
}

function drawGate() {
  const d = Number($("hidden").value);
  const gate = example.attention_gate($("kind").value, d, 7);
  const canvas = $("gate");
  canvas.getContext("2d").clearRect(0, 0, canvas.width, canvas.height);
  heatmap(canvas, (r, c) => gate[c * d + r], d, example.frames, 0, 0, 1);
}

function refresh() {
  if (example) example.free();
  example = new Example(Number($("seed").value), Number($("seconds").value), Number($("snr").value), $("noise").value);
  drawExample();
  drawGate();
}

await init();
drawLoss();
refresh();
$("gammas").addEventListener("change", drawLoss);
for (const id of ["seed", "seconds", "snr", "noise"]) $(id).addEventListener("change", refresh);
for (const id of ["kind", "hidden"]) $(id).addEventListener("change", drawGate);
