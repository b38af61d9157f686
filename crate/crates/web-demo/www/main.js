import init, { protect, countermeasure, animate } from "./pkg/animguard_web.js";

const SIDE = 64;
const FRAMES = 4;
const $ = (id) => document.getElementById(id);

let clean = null;
let protectedRgba = null;

function status(msg) {
  $("status").textContent = msg;
}

function draw(id, rgba) {
  const ctx = $(id).getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), SIDE, SIDE), 0, 0);
}

function fromSource(source) {
  const canvas = new OffscreenCanvas(SIDE, SIDE);
  const ctx = canvas.getContext("2d");
  ctx.drawImage(source, 0, 0, SIDE, SIDE);
  return new Uint8Array(ctx.getImageData(0, 0, SIDE, SIDE).data.buffer);
}

function samplePattern() {
  const out = new Uint8Array(SIDE * SIDE * 4);
  for (let y = 0; y < SIDE; y++) {
    for (let x = 0; x < SIDE; x++) {
      const i = (y * SIDE + x) * 4;
      const r = Math.hypot(x - SIDE / 2, y - SIDE / 2);
      out[i] = 128 + 100 * Math.sin(r / 3);
      out[i + 1] = (x * 4) % 256;
      out[i + 2] = (y * 4) % 256;
      out[i + 3] = 255;
    }
  }
  return out;
}

function setClean(rgba) {
  clean = rgba;
  protectedRgba = null;
  draw("clean", clean);
  for (const id of ["protected", "diff", "countered", "loss"]) {
    const c = $(id);
    c.getContext("2d").clearRect(0, 0, c.width, c.height);
  }
  $("strip").replaceChildren();
}

function drawLosses(losses) {
  const c = $("loss");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (losses.length < 2) return;
  const lo = Math.min(...losses);
  const hi = Math.max(...losses);
  const span = hi - lo || 1;
  ctx.beginPath();
  losses.forEach((v, i) => {
    const x = (i / (losses.length - 1)) * (c.width - 10) + 5;
    const y = c.height - 5 - ((v - lo) / span) * (c.height - 10);
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.strokeStyle = "#36c";
  ctx.stroke();
}

function runProtect() {
  if (!clean) return status("Load an image first.");
  status("Protecting...");
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const out = protect(SIDE, SIDE, clean, +$("budget").value, +$("iterations").value, BigInt($("seed").value));
      protectedRgba = out.rgba;
      draw("protected", protectedRgba);
      const diff = protectedRgba.map((v, i) => (i % 4 === 3 ? 255 : Math.min(255, Math.abs(v - clean[i]) * 8)));
      draw("diff", diff);
      drawLosses(Array.from(out.losses));
      $("protected-caption").textContent = `Protected (max |delta| ${(out.linf * 255).toFixed(1)}/255)`;
      status(`Done in ${((performance.now() - t0) / 1000).toFixed(1)} s.`);
    } catch (e) {
      status(e.message ?? String(e));
    }
  }, 10);
}

function runCountermeasure() {
  if (!protectedRgba) return status("Protect an image first.");
  try {
    draw("countered", countermeasure(SIDE, SIDE, protectedRgba, $("kind").value, +$("param").value));
    status("");
  } catch (e) {
    status(e.message ?? String(e));
  }
}

function runAnimate() {
  if (!protectedRgba) return status("Protect an image first.");
  const strip = $("strip");
  strip.replaceChildren();
  const seed = BigInt($("seed").value);
  for (const [label, src] of [["clean", clean], ["protected", protectedRgba]]) {
    const frames = animate(SIDE, SIDE, src, FRAMES, seed);
    const row = document.createElement("div");
    row.className = "row";
    row.append(label);
    for (let f = 0; f < FRAMES; f++) {
      const c = document.createElement("canvas");
      c.width = SIDE;
      c.height = SIDE;
      const bytes = frames.slice(f * SIDE * SIDE * 4, (f + 1) * SIDE * SIDE * 4);
      c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(bytes), SIDE, SIDE), 0, 0);
      row.append(c);
    }
    strip.append(row);
  }
}

await init();
$("sample").onclick = () => setClean(samplePattern());
$("file").onchange = async (ev) => {
  const file = ev.target.files[0];
  if (file) setClean(fromSource(await createImageBitmap(file)));
};
$("kind").onchange = () => {
  $("param").value = { jpeg: 75, blur: 3, noise: 0.05, median: 9, bits: 3 }[$("kind").value];
};
$("protect").onclick = runProtect;
$("counter").onclick = runCountermeasure;
$("animate").onclick = runAnimate;
setClean(samplePattern());
