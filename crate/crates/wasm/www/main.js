import init, { rankExamples, policySurface, decodeTrace } from "./pkg/dipdlm_wasm.js";

const $ = (id) => document.getElementById(id);

function showError(el, e) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "err";
  p.textContent = String(e);
  el.appendChild(p);
}

function rank() {
  const lambda = Number($("rank-lambda").value);
  $("rank-lambda-v").textContent = lambda.toFixed(2);
  const out = $("rank-out");
  try {
    const r = JSON.parse(rankExamples($("rank-query").value, $("rank-pool").value, lambda));
    out.innerHTML = "";
    for (const e of r.order) {
      const li = document.createElement("li");
      li.textContent = `${e.id}  ${e.score.toFixed(3)}  ${e.question}`;
      out.appendChild(li);
    }
  } catch (e) {
    showError(out, e);
  }
}

function surface() {
  const muBar = Number($("pol-mubar").value);
  const eps = Number($("pol-eps").value);
  const blocks = Math.max(1, Math.min(64, Number($("pol-blocks").value) | 0));
  $("pol-mubar-v").textContent = muBar.toFixed(2);
  $("pol-eps-v").textContent = eps.toFixed(2);
  const canvas = $("pol-canvas");
  const ctx = canvas.getContext("2d");
  let s;
  try {
    s = JSON.parse(policySurface(muBar, eps, blocks, 64));
  } catch (e) {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.fillText(String(e), 10, 20);
    return;
  }
  const rows = s.values.length;
  const w = canvas.width / blocks;
  const h = canvas.height / rows;
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < blocks; j++) {
      const v = Math.round(255 * s.values[i][j]);
      ctx.fillStyle = `rgb(${v}, ${Math.round(v * 0.7)}, ${255 - v})`;
      ctx.fillRect(j * w, canvas.height - (i + 1) * h, Math.ceil(w), Math.ceil(h));
    }
  }
}

function decode() {
  const out = $("dec-out");
  const canvas = $("dec-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let r;
  try {
    r = JSON.parse(decodeTrace(
      $("dec-query").value,
      Number($("dec-eps").value),
      Number($("dec-lambda").value),
      Number($("dec-seed").value) >>> 0,
      128,
      16,
    ));
  } catch (e) {
    out.textContent = String(e);
    return;
  }
  const palette = ["#9ecae1", "#6baed6", "#4292c6", "#2171b5", "#084594"];
  const maxRev = Math.max(...r.steps.map((s) => s.revealed));
  const bw = canvas.width / r.steps.length;
  r.steps.forEach((s, i) => {
    const k = r.k_per_block[s.block - 1];
    const bh = (canvas.height - 10) * s.revealed / maxRev;
    ctx.fillStyle = palette[Math.min(k, palette.length) - 1];
    ctx.fillRect(i * bw, canvas.height - bh, Math.max(1, bw - 1), bh);
  });
  const lines = [
    `examples per block: ${r.k_per_block.join(" ")}`,
    `inserted before blocks: ${r.insert_blocks.join(", ") || "none"}`,
    `steps: ${r.steps.length}, refreshes: ${r.refreshes}`,
    "",
    ...r.policy.map((p) => p.consulted
      ? `block ${p.block}: ${p.action} (mu ${p.mu?.toFixed(3) ?? "-"}, mu_bar ${p.mu_bar?.toFixed(3) ?? "-"}, P ${p.p_insert?.toFixed(3) ?? "-"}, G ${p.penalty?.toFixed(3) ?? "-"})`
      : `block ${p.block}: not consulted`),
    "",
    r.text,
  ];
  out.textContent = lines.join("\n");
}

await init();
for (const id of ["rank-query", "rank-pool", "rank-lambda"]) $(id).addEventListener("input", rank);
for (const id of ["pol-mubar", "pol-eps", "pol-blocks"]) $(id).addEventListener("input", surface);
$("dec-run").addEventListener("click", decode);
rank();
surface();
