// Built bindings are expected in ./pkg (see the repository README).
import init, { pdp_partition, cluster_demo, contamination } from "./pkg/bacon_wasm.js";

const num = (id) => Number(document.getElementById(id).value);
const out = (id, text, bad) => {
  const el = document.getElementById(id);
  el.textContent = text;
  el.className = bad ? "err" : "";
};

function drawPartition() {
  try {
    const r = JSON.parse(pdp_partition(num("pp"), num("pm"), num("pd"), num("ps")));
    const bars = document.getElementById("bars");
    bars.replaceChildren();
    const top = r.sizes[0];
    for (const s of r.sizes) {
      const b = document.createElement("span");
      b.className = "bar";
      b.style.height = `${Math.max(1, (120 * s) / top)}px`;
      b.title = s;
      bars.append(b);
    }
    out("pout", `blocks q = ${r.q} (prior mean ${r.expected_q.toFixed(2)})\nlog EPPF = ${r.log_eppf.toFixed(3)}\nlargest blocks: ${r.sizes.slice(0, 12).join(", ")}`);
  } catch (e) {
    out("pout", String(e), true);
  }
}

function runClustering() {
  out("cout", "running…");
  // let the status paint before the synchronous run
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const r = JSON.parse(cluster_demo(num("cn"), num("cp"), num("cd"), num("cr"), num("cw"), num("cs")));
      const ms = performance.now() - t0;
      const canvas = document.getElementById("heat");
      canvas.width = canvas.height = r.p;
      const ctx = canvas.getContext("2d");
      const img = ctx.createImageData(r.p, r.p);
      r.heatmap.forEach((v, i) => {
        const shade = Math.round(255 * (1 - v));
        img.data.set([shade, shade, 255, 255], 4 * i);
      });
      ctx.putImageData(img, 0, 0);
      out("cout", `true clusters Q0 = ${r.q0}, least-squares q = ${r.q_hat}\ntau = ${r.tau.toFixed(4)} (k-means with k = Q0: ${r.kmeans_tau.toFixed(4)})\nposterior mean d = ${r.d_mean.toFixed(3)}\n${ms.toFixed(0)} ms`);
    } catch (e) {
      out("cout", String(e), true);
    }
  }, 10);
}

function updateChannel() {
  try {
    const r = JSON.parse(contamination(num("q0"), num("q1"), num("qa"), num("qb"), num("qk"), num("qn"), num("qp")));
    const f = (x) => x.toFixed(4);
    out("qout", `Q = | ${f(r.q[0][0])}  ${f(r.q[0][1])} |\n    | ${f(r.q[1][0])}  ${f(r.q[1][1])} |\nP(two latent vectors coincide) <= ${r.identical_bound.toExponential(3)}`);
  } catch (e) {
    out("qout", String(e), true);
  }
}

await init();
document.getElementById("pgo").addEventListener("click", drawPartition);
document.getElementById("cgo").addEventListener("click", runClustering);
for (const id of ["q0", "q1", "qa", "qb", "qk", "qn", "qp"]) {
  document.getElementById(id).addEventListener("input", updateChannel);
}
drawPartition();
updateChannel();
