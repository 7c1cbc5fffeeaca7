import init, { hitRatio, preloadTimeline, ratioSearch } from "./pkg/tierlm_web.js";

const COLORS = { compute: "#4a7fc1", stall: "#d9534f", preload: "#5cb85c", demand: "#f0ad4e" };

function field(section, name) {
  return section.querySelector(`[name=${name}]`);
}

function num(section, name) {
  return Number(field(section, name).value);
}

function show(section, text, isError = false) {
  const out = section.querySelector(".out");
  out.textContent = text;
  out.classList.toggle("err", isError);
}

function canvas(section) {
  const c = section.querySelector("canvas");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.font = "11px system-ui";
  return [c, ctx];
}

function lineChart(section, ys, yMax, label) {
  const [c, ctx] = canvas(section);
  const pad = 30;
  const w = c.width - 2 * pad;
  const h = c.height - 2 * pad;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#555";
  ctx.fillText(yMax.toFixed(2), 2, pad + 4);
  ctx.fillText("0", 2, pad + h);
  ctx.fillText(label, pad, pad - 8);
  ctx.strokeStyle = COLORS.compute;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ys.forEach((y, i) => {
    const x = pad + (ys.length > 1 ? (i / (ys.length - 1)) * w : 0);
    const py = pad + h - (y / yMax) * h;
    i === 0 ? ctx.moveTo(x, py) : ctx.lineTo(x, py);
  });
  ctx.stroke();
}

function runHits() {
  const s = document.getElementById("hits");
  s.querySelector("[data-echo=overlap]").textContent = field(s, "overlap").value;
  const kind = field(s, "policy").value;
  const policy = kind === "lru" ? { kind, slack: num(s, "slack") } : { kind };
  const params = {
    overlap: num(s, "overlap"),
    fractions: [num(s, "fp16"), num(s, "int8"), num(s, "int4")],
    policy,
    seed: num(s, "seed"),
  };
  try {
    const r = JSON.parse(hitRatio(JSON.stringify(params)));
    lineChart(s, r.per_token, 1, "hit ratio per token");
    show(s, `hit ratio ${r.hit_ratio.toFixed(4)}   measured overlap ${r.mean_overlap.toFixed(4)}`);
  } catch (e) {
    show(s, String(e), true);
  }
}

function runPreload() {
  const s = document.getElementById("preload");
  const params = {
    lookahead: num(s, "lookahead"),
    compute_ms: num(s, "compute_ms"),
    load_ms: num(s, "load_ms"),
    lanes: num(s, "lanes"),
    tokens: num(s, "tokens"),
  };
  try {
    const r = JSON.parse(preloadTimeline(JSON.stringify(params)));
    const [c, ctx] = canvas(s);
    const left = 80;
    const rowH = (c.height - 20) / r.rows.length;
    const scale = (c.width - left - 10) / r.end_ms;
    r.rows.forEach((name, i) => {
      ctx.fillStyle = "#555";
      ctx.fillText(name, 4, i * rowH + rowH / 2 + 4);
    });
    for (const b of r.bars) {
      const row = r.rows.indexOf(b.row);
      ctx.fillStyle = COLORS[b.kind];
      ctx.fillRect(left + b.start_ms * scale, row * rowH + 4, Math.max(1, (b.end_ms - b.start_ms) * scale - 1), rowH - 8);
    }
    ctx.fillStyle = "#555";
    ctx.fillText(`${r.end_ms.toFixed(1)} ms`, c.width - 60, c.height - 4);
    show(s, `tokens/s ${r.tokens_per_second.toFixed(2)}   total stall ${r.stall_ms.toFixed(1)} ms\n` +
      "blue compute, red stall, green preload, orange demand fetch");
  } catch (e) {
    show(s, String(e), true);
  }
}

function runSearch() {
  const s = document.getElementById("search");
  const params = {
    optimum: [num(s, "opt_high"), num(s, "opt_low")],
    step: num(s, "step"),
    sharpness: num(s, "sharpness"),
  };
  try {
    const r = JSON.parse(ratioSearch(JSON.stringify(params)));
    const scores = r.trajectory.map((p) => p.score);
    lineChart(s, scores, Math.max(...scores) * 1.1, "entropy along the trajectory");
    const rows = r.trajectory.map((p) =>
      `${String(p.step).padStart(3)}  fp16 ${p.r_high.toFixed(3)}  int4 ${p.r_low.toFixed(3)}  score ${p.score.toFixed(3)}`);
    show(s, rows.join("\n") + `\nbest: fp16 ${r.best.r_high.toFixed(3)}, int4 ${r.best.r_low.toFixed(3)}`);
  } catch (e) {
    show(s, String(e), true);
  }
}

await init();
for (const [id, run] of [["hits", runHits], ["preload", runPreload], ["search", runSearch]]) {
  const s = document.getElementById(id);
  s.addEventListener("input", run);
  s.addEventListener("change", run);
  run();
}
