import init, { ImpactDemo } from "./pkg/mgnt_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view");
const ctx = canvas.getContext("2d");
let demo = null;

const tau = () => Math.pow(10, Number($("tau").value));

function rebuild() {
  const kappa = Number($("kappa").value);
  $("kappa-v").textContent = kappa.toFixed(2);
  if (demo) demo.free();
  demo = new ImpactDemo(kappa, 50);
  $("frame").max = demo.n_frames() - 1;
  draw();
}

function bounds(x) {
  let lo = [Infinity, Infinity], hi = [-Infinity, -Infinity];
  for (let i = 0; i < x.length; i += 2) {
    for (const a of [0, 1]) {
      lo[a] = Math.min(lo[a], x[i + a]);
      hi[a] = Math.max(hi[a], x[i + a]);
    }
  }
  return { lo, hi };
}

function tokenColour(k, p) {
  return `hsl(${Math.round((360 * k) / p)}, 70%, 50%)`;
}

function draw() {
  const t = Number($("frame").value);
  const r = Number($("radius").value);
  $("frame-v").textContent = t;
  $("radius-v").textContent = r.toFixed(2);
  $("tau-v").textContent = tau().toFixed(3);
  let x, h, contacts, w;
  try {
    x = demo.positions(t);
    h = demo.hardening(t);
    contacts = demo.contact_edges(t, r);
    const seed = $("gumbel").checked ? Number($("seed").value) : -1;
    w = demo.slice_weights(t, tau(), seed);
    $("status").textContent = "";
  } catch (e) {
    $("status").textContent = String(e);
    return;
  }

  const first = bounds(demo.positions(0));
  const { lo, hi } = bounds(x);
  lo[0] = Math.min(lo[0], first.lo[0]); lo[1] = Math.min(lo[1], first.lo[1]);
  hi[0] = Math.max(hi[0], first.hi[0]); hi[1] = Math.max(hi[1], first.hi[1]);
  const s = Math.min((canvas.width - 40) / (hi[0] - lo[0]), (canvas.height - 40) / (hi[1] - lo[1]));
  const px = (i) => [20 + (x[2 * i] - lo[0]) * s, canvas.height - 20 - (x[2 * i + 1] - lo[1]) * s];

  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const mesh = demo.mesh_edges();
  ctx.strokeStyle = "#999";
  ctx.lineWidth = 1;
  ctx.beginPath();
  for (let e = 0; e < mesh.length; e += 2) {
    const a = px(mesh[e]), b = px(mesh[e + 1]);
    ctx.moveTo(...a); ctx.lineTo(...b);
  }
  ctx.stroke();

  ctx.strokeStyle = "#d33";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (let e = 0; e < contacts.length; e += 2) {
    const a = px(contacts[e]), b = px(contacts[e + 1]);
    ctx.moveTo(...a); ctx.lineTo(...b);
  }
  ctx.stroke();
  $("contacts").textContent = `${contacts.length / 2} contact pairs`;

  const p = demo.n_tokens();
  const n = demo.n_nodes();
  const deformable = demo.deformable();
  const hmax = Math.max(1e-12, ...h);
  const slices = $("colour").value === "slices";
  let entropy = 0;
  for (let i = 0; i < n; i++) {
    const row = w.subarray(p * i, p * (i + 1));
    let best = 0;
    for (let k = 0; k < p; k++) {
      if (row[k] > row[best]) best = k;
      if (row[k] > 0) entropy -= row[k] * Math.log(row[k]);
    }
    const [cx, cy] = px(i);
    ctx.fillStyle = !deformable[i]
      ? "#333"
      : slices
        ? tokenColour(best, p)
        : `rgb(${Math.round(255 * h[i] / hmax)}, 60, ${Math.round(255 * (1 - h[i] / hmax))})`;
    ctx.beginPath();
    ctx.arc(cx, cy, deformable[i] ? 4 : 2, 0, 2 * Math.PI);
    ctx.fill();
  }
  $("entropy").textContent = `mean slice entropy ${(entropy / n).toFixed(3)} (max ${Math.log(p).toFixed(3)})`;
}

await init();
rebuild();
$("kappa").addEventListener("change", rebuild);
for (const id of ["frame", "radius", "tau", "colour", "gumbel", "seed"]) {
  $(id).addEventListener("input", draw);
}
