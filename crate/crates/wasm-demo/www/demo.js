import init, { sample, masks, attention, entropy } from "./pkg/mumae_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const big = (id) => BigInt(Math.max(0, Math.floor(num(id))));

// Greyscale image from values in [0, 1], upscaled by `scale`.
function grey(canvas, values, w, h, scale) {
  canvas.width = w * scale;
  canvas.height = h * scale;
  const ctx = canvas.getContext("2d");
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const v = Math.round(255 * Math.min(1, Math.max(0, values[y * w + x])));
      ctx.fillStyle = `rgb(${v},${v},${v})`;
      ctx.fillRect(x * scale, y * scale, scale, scale);
    }
  }
}

function drawSample() {
  const s = sample(num("cls"), num("idx"), big("dseed"));
  const frames = $("frames");
  frames.replaceChildren();
  const px = s.height * s.width;
  const video = s.video;
  for (let f = 0; f < s.frames; f++) {
    const c = document.createElement("canvas");
    grey(c, video.subarray(f * px, (f + 1) * px), s.width, s.height, 3);
    frames.append(c);
  }
  const sensors = $("sensors");
  sensors.replaceChildren();
  const data = s.sensors;
  const colours = ["#d62728", "#2ca02c", "#1f77b4", "#9467bd"];
  const stride = s.sensor_len * s.sensor_channels;
  for (let k = 0; k < s.num_sensors; k++) {
    const c = document.createElement("canvas");
    c.width = 230;
    c.height = 80;
    const ctx = c.getContext("2d");
    const block = data.subarray(k * stride, (k + 1) * stride);
    let lo = Infinity, hi = -Infinity;
    for (const v of block) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
    const span = hi - lo || 1;
    for (let ch = 0; ch < s.sensor_channels; ch++) {
      ctx.strokeStyle = colours[ch % colours.length];
      ctx.beginPath();
      for (let t = 0; t < s.sensor_len; t++) {
        const x = (t / (s.sensor_len - 1)) * (c.width - 1);
        const y = c.height - 2 - ((block[t * s.sensor_channels + ch] - lo) / span) * (c.height - 4);
        t === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
      }
      ctx.stroke();
    }
    sensors.append(c);
  }
  s.free();
}

function drawMasks() {
  $("ratio-out").textContent = `${Math.round(num("ratio") * 100)}%`;
  const m = masks($("strategy").value, num("ratio"), num("patch"), big("mseed"));
  const tube = $("tube");
  tube.replaceChildren();
  const hw = m.grid_h * m.grid_w;
  const v = m.video;
  const cell = Math.max(6, Math.floor(96 / Math.max(m.grid_h, m.grid_w)));
  for (let t = 0; t < m.grid_t; t++) {
    const c = document.createElement("canvas");
    grey(c, Array.from(v.subarray(t * hw, (t + 1) * hw), (x) => (x ? 0.15 : 0.9)), m.grid_w, m.grid_h, cell);
    tube.append(c);
  }
  const s = m.sensors;
  grey($("sensor-mask"), Array.from(s, (x) => (x ? 0.15 : 0.9)), m.sensor_tokens, m.num_sensors, 14);
  m.free();
}

function drawAttention() {
  const a = attention(num("nq"), num("nk"), num("dh"), num("spread"), big("aseed"));
  const uniform = Math.log(a.cols);
  for (const [name, w] of [["sqrt", a.sqrt], ["exp", a.exp]]) {
    let max = 0;
    for (const x of w) max = Math.max(max, x);
    grey($(`att-${name}`), Array.from(w, (x) => x / (max || 1)), a.cols, a.rows, 14);
    $(`cap-${name}`).textContent =
      `${name}(d) denominator: mean row entropy ${entropy(w, a.cols).toFixed(3)} of ${uniform.toFixed(3)} nats, max weight ${max.toFixed(3)}`;
  }
  a.free();
}

function guard(f) {
  return () => {
    try {
      $("error").textContent = "";
      f();
    } catch (e) {
      $("error").textContent = String(e);
    }
  };
}

await init();
const groups = [
  [["cls", "idx", "dseed"], drawSample],
  [["strategy", "ratio", "patch", "mseed"], drawMasks],
  [["nq", "nk", "dh", "spread", "aseed"], drawAttention],
];
for (const [ids, f] of groups) {
  for (const id of ids) $(id).addEventListener("input", guard(f));
  guard(f)();
}
