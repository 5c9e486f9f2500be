import init, { spectrum, marginal, sphere_decay } from "./pkg/kinlab_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function report(id, f) {
  const out = $(id);
  out.classList.remove("err");
  try {
    f(out);
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
  }
}

// Line plot of several series sharing an x axis. Series: {y, color, label, log}.
function plot(canvas, xs, series, logY) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, M = 44;
  ctx.clearRect(0, 0, W, H);
  const tf = (v) => (logY ? Math.log10(Math.max(v, 1e-300)) : v);
  const ys = series.flatMap((s) => s.y.filter((v) => !logY || v > 0).map(tf));
  const x0 = Math.min(...xs), x1 = Math.max(...xs);
  let y0 = Math.min(...ys), y1 = Math.max(...ys);
  if (y1 - y0 < 1e-12) { y0 -= 0.5; y1 += 0.5; }
  const px = (x) => M + ((x - x0) / (x1 - x0 || 1)) * (W - 2 * M);
  const py = (y) => H - M - ((tf(y) - y0) / (y1 - y0)) * (H - 2 * M);
  ctx.strokeStyle = "#333";
  ctx.beginPath(); ctx.moveTo(M, M); ctx.lineTo(M, H - M); ctx.lineTo(W - M, H - M); ctx.stroke();
  ctx.fillStyle = "#333"; ctx.font = "11px sans-serif";
  ctx.fillText(x0.toPrecision(3), M, H - M + 14);
  ctx.fillText(x1.toPrecision(3), W - M - 24, H - M + 14);
  ctx.fillText((logY ? "1e" : "") + y1.toPrecision(3), 2, M + 4);
  ctx.fillText((logY ? "1e" : "") + y0.toPrecision(3), 2, H - M);
  series.forEach((s, i) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    let started = false;
    xs.forEach((x, k) => {
      const v = s.y[k];
      if (logY && !(v > 0)) { started = false; return; }
      started ? ctx.lineTo(px(x), py(v)) : ctx.moveTo(px(x), py(v));
      started = true;
    });
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, W - M - 140, M + 14 * i);
  });
}

function runSpectrum() {
  report("sp-out", (out) => {
    const r = JSON.parse(spectrum(num("sp-n"), $("sp-mom").checked, num("sp-eps"), num("sp-j")));
    const rows = r.entries
      .map((e) => `<tr><td>${e.j}</td><td>${e.unscaled.toPrecision(8)}</td><td>${e.scaled.toPrecision(8)}</td><td>${e.limit.toPrecision(8)}</td></tr>`)
      .join("");
    out.innerHTML = `<p>sphere dimension ${r.dim}, ε<sub>eff</sub> = ${r.eps_eff}</p>` +
      `<table><tr><th>j</th><th>unscaled</th><th>scaled</th><th>N → ∞</th></tr>${rows}</table>`;
  });
}

function runMarginal() {
  report("mg-out", (out) => {
    const r = JSON.parse(marginal(num("mg-n"), num("mg-eps"), num("mg-r"), 400));
    plot($("mg-plot"), r.r, [
      { y: r.marginal, color: "#1f77b4", label: "finite-N marginal" },
      { y: r.maxwellian, color: "#d62728", label: "Maxwellian" },
    ], false);
    out.textContent = `sup distance along the ray: ${r.sup_distance.toExponential(3)}`;
  });
}

function runDecay() {
  report("dc-out", (out) => {
    const t0 = performance.now();
    const r = JSON.parse(sphere_decay(num("dc-n"), $("dc-mom").checked, num("dc-deg"), num("dc-rep"), num("dc-dt"), num("dc-t"), num("dc-seed")));
    const m0 = r.means[0];
    const pred = r.times.map((t) => Math.abs(m0) * Math.exp(-r.predicted_rate * t));
    plot($("dc-plot"), r.times, [
      { y: r.means.map(Math.abs), color: "#1f77b4", label: `|${r.observable}|` },
      { y: pred, color: "#d62728", label: "predicted decay" },
    ], true);
    const fit = r.fit ? `${r.fit.rate.toFixed(4)} ± ${r.fit.stderr.toFixed(4)} (${r.fit.n_points} points)` : "not enough signal";
    out.textContent = `fitted rate ${fit}\npredicted  ${r.predicted_rate.toFixed(4)}\n${((performance.now() - t0) / 1000).toFixed(1)} s`;
  });
}

await init();
$("sp-go").onclick = runSpectrum;
$("mg-go").onclick = runMarginal;
$("dc-go").onclick = runDecay;
runSpectrum();
runMarginal();
