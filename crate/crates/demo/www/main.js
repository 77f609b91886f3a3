// SPDX-License-Identifier: MIT OR Apache-2.0
import init, { influence, necessity, superposition } from "./pkg/latentscm_demo.js";

const $ = (id) => document.getElementById(id);

function fail(out, e) {
  out.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = String(e);
  out.append(p);
}

function heatmap(m) {
  const max = Math.max(...m.flat(), 1e-300);
  const rows = m.map((row, t) => "<tr><th>" + (t + 1) + "</th>" + row.map((v, s) => {
    if (s <= t) return "<td></td>";
    const shade = Math.round(255 * (1 - v / max));
    return `<td style="background: rgb(${shade},${shade},255)" title="W(${t + 1},${s + 1}) = ${v}">${v.toFixed(3)}</td>`;
  }).join("") + "</tr>");
  const head = "<tr><th>t \\ s</th>" + m.map((_, s) => "<th>" + (s + 1) + "</th>").join("") + "</tr>";
  return `<table class="heat">${head}${rows.join("")}</table>`;
}

function chart(series, ymax) {
  const w = 420, h = 180, pad = 30;
  const n = series[0].values.length;
  const x = (i) => pad + (i * (w - 2 * pad)) / Math.max(n - 1, 1);
  const y = (v) => h - pad - (v / ymax) * (h - 2 * pad);
  let svg = `<svg width="${w}" height="${h}">`;
  svg += `<line x1="${pad}" y1="${h - pad}" x2="${w - pad}" y2="${h - pad}" stroke="#999"/>`;
  svg += `<text x="4" y="${y(ymax) + 4}" font-size="10">${ymax}</text><text x="4" y="${h - pad + 4}" font-size="10">0</text>`;
  for (let i = 0; i < n; i++) svg += `<text x="${x(i) - 3}" y="${h - 10}" font-size="10">${i + 1}</text>`;
  for (const s of series) {
    const pts = s.values.map((v, i) => `${x(i)},${y(v)}`).join(" ");
    svg += `<polyline fill="none" stroke="${s.color}" stroke-width="2" points="${pts}"/>`;
    s.values.forEach((v, i) => svg += `<circle cx="${x(i)}" cy="${y(v)}" r="3" fill="${s.color}"><title>${s.name} ${i + 1}: ${v}</title></circle>`);
  }
  svg += "</svg>";
  const legend = series.map((s) => `<span style="color:${s.color}">&#9632; ${s.name}</span>`).join(" &nbsp; ");
  return svg + "<br>" + legend;
}

function form(id) {
  const data = new FormData($(id));
  return (name) => data.get(name);
}

function runInfluence(ev) {
  ev?.preventDefault();
  const f = form("influence-form");
  const out = $("influence-out");
  try {
    const r = JSON.parse(influence(f("kind"), f("op"), Number(f("n")), Number(f("alpha")), BigInt(f("seed"))));
    const m = r.metrics;
    out.innerHTML = heatmap(r.w) +
      `<p>Locality(1) ${m.locality.toFixed(3)}, span ${m.span.toFixed(3)}, ` +
      `early-out ${m.early_out.toFixed(3)}, late-in ${m.late_in.toFixed(3)}</p>` +
      `<p>Principal edges: ${r.edges.map((e) => e.from + "&rarr;" + e.to).join(", ") || "none"}</p>` +
      `<details><summary>DOT</summary><pre></pre></details>`;
    out.querySelector("pre").textContent = r.dot;
  } catch (e) {
    fail(out, e);
  }
}

function runNecessity(ev) {
  ev?.preventDefault();
  const f = form("necessity-form");
  const out = $("necessity-out");
  try {
    const r = JSON.parse(necessity(f("kind"), f("op"), Number(f("n")), BigInt(f("seed"))));
    out.innerHTML = chart([
      { name: "flip rate at t", values: r.flip_rate, color: "#c33" },
      { name: "solved fraction S(k)", values: r.solved_fraction, color: "#36c" },
    ], 1);
  } catch (e) {
    fail(out, e);
  }
}

function runSuperposition(ev) {
  ev?.preventDefault();
  const f = form("superposition-form");
  const out = $("superposition-out");
  try {
    const r = JSON.parse(superposition(Number(f("n")), Number(f("k")), BigInt(f("seed"))));
    out.innerHTML = chart([
      { name: "probe SS", values: r.probe, color: "#393" },
      { name: "teacher-forced SS", values: r.teacher_forced, color: "#c63" },
    ], 0.5) + `<p>${r.prompts} two-mode prompts, ${r.excluded} excluded</p>`;
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("status").textContent = "Ready. Each run happens in your browser.";
$("influence-form").addEventListener("submit", runInfluence);
$("necessity-form").addEventListener("submit", runNecessity);
$("superposition-form").addEventListener("submit", runSuperposition);
runInfluence();
runNecessity();
