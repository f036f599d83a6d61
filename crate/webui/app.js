// Single-page client for the debias HTTP API. Every mutation disables the
// controls until the response arrives, so one request is in flight at a time.
"use strict";

const $ = (id) => document.getElementById(id);
const fmt = (x, d = 2) => (x === null || x === undefined ? "-" : Number(x).toFixed(d));

function session() {
  return $("session").value.trim() || "default";
}

async function api(method, path, body) {
  const headers = { "X-Session-Id": session() };
  if (body !== undefined) headers["Content-Type"] = "application/json";
  if (method !== "GET") headers["X-Request-Id"] = crypto.randomUUID();
  const res = await fetch("/api" + path, {
    method,
    headers,
    body: body === undefined ? undefined : JSON.stringify(body),
  });
  const data = await res.json().catch(() => null);
  if (!res.ok) {
    const err = new Error((data && data.message) || res.statusText);
    err.code = data && data.code;
    err.detail = data && data.detail;
    throw err;
  }
  return data;
}

function status(text, error = false) {
  $("status").textContent = text;
  $("status").className = error ? "error" : "";
}

async function mutate(fn) {
  const buttons = document.querySelectorAll("button");
  buttons.forEach((b) => (b.disabled = true));
  try {
    await fn();
  } catch (e) {
    status(e.message, true);
  } finally {
    buttons.forEach((b) => (b.disabled = false));
  }
}

function table(headers, rows, rowClass) {
  const t = document.createElement("table");
  const head = t.createTHead().insertRow();
  headers.forEach((h) => {
    const th = document.createElement("th");
    th.textContent = h;
    head.appendChild(th);
  });
  const body = t.createTBody();
  rows.forEach((r, i) => {
    const tr = body.insertRow();
    if (rowClass) tr.className = rowClass(i);
    r.forEach((cell) => {
      const td = tr.insertCell();
      if (cell instanceof Node) td.appendChild(cell);
      else {
        td.textContent = cell;
        if (typeof cell === "string" && isNaN(Number(cell))) td.className = "text";
      }
    });
  });
  return t;
}

function place(id, node) {
  $(id).replaceChildren(node);
}

async function loadOverview() {
  const o = await api("GET", "/overview");
  const gauge = (label, value) => {
    const span = document.createElement("span");
    span.className = "gauge";
    span.innerHTML = `<b>${value}</b>${label}`;
    return span;
  };
  const box = document.createElement("div");
  box.append(
    gauge("held-out accuracy", fmt(o.heldout_accuracy)),
    gauge("accuracy change", o.accuracy_delta == null ? "-" : (o.accuracy_delta >= 0 ? "+" : "") + fmt(o.accuracy_delta)),
    gauge("representation rate", fmt(o.overall_rr)),
    gauge("coverage rate", fmt(o.overall_cr)),
    gauge("data quality", fmt(o.quality_overall)),
    gauge("training rows", o.train_rows)
  );
  place("overview", box);
}

async function loadVariables() {
  const report = await api("GET", "/variables");
  const rows = report.variables.map((v) => {
    const link = document.createElement("a");
    link.href = "#";
    link.textContent = v.variable;
    link.onclick = (e) => {
      e.preventDefault();
      loadSegments(v.variable).catch((err) => status(err.message, true));
    };
    return [link, fmt(v.rr), fmt(v.cr)];
  });
  place("variables", table(["variable", "RR", "CR"], rows));
}

async function loadSegments(name) {
  const v = await api("GET", "/variables/" + encodeURIComponent(name));
  const rows = v.segments.map((s) => [
    s.segment.label,
    s.count,
    fmt(s.representation_rate),
    s.covered ? "yes" : "no",
    fmt(s.accuracy.accuracy),
  ]);
  const low = (i) => (v.segments[i].covered ? "" : "low");
  const t = table(["segment", "count", "rate", "covered", "accuracy"], rows, low);
  const caption = t.createCaption();
  caption.textContent = `${name} (coverage threshold ${v.coverage_threshold})`;
  place("segments", t);
}

async function loadQuality() {
  const q = await api("GET", "/quality");
  const rows = [
    ["outliers", q.outlier_severity],
    ["duplicates", q.duplicate_severity],
    ["correlated features", q.correlation_severity],
    ["skewed variables", q.skew_severity],
    ["class imbalance", q.imbalance_severity],
    ["overall", q.overall],
  ].map(([k, v]) => [k, fmt(v * 100, 1) + "%"]);
  place("quality", table(["issue", "severity"], rows));
}

async function loadBatch() {
  let view;
  try {
    view = await api("GET", "/generated?sort=confidence");
  } catch (e) {
    if (e.code === "NO_PENDING_BATCH") {
      $("batch").textContent = "No pending batch.";
      return;
    }
    throw e;
  }
  const rows = view.rows.map((r) => {
    const cells = r.values.map((value, col) => {
      const span = document.createElement("span");
      span.textContent = value;
      span.contentEditable = "true";
      span.onblur = () => {
        if (span.textContent !== value) editCell(r.row_id, view.columns[col], span.textContent);
      };
      return span;
    });
    const remove = document.createElement("button");
    remove.textContent = "remove";
    remove.onclick = () => mutate(async () => {
      await api("DELETE", "/generated/" + r.row_id);
      await loadBatch();
    });
    return [r.row_id, r.provenance, ...cells, r.prediction.predicted_class, fmt(r.prediction.confidence, 3), remove];
  });
  const t = table(["id", "provenance", ...view.columns, "predicted", "confidence", ""], rows);
  const caption = t.createCaption();
  caption.textContent = `${view.total} rows, ${view.edit_count} edits, estimated accuracy ${fmt(view.estimated_accuracy)}`;
  place("batch", t);
}

function editCell(rowId, variable, value) {
  mutate(async () => {
    const preview = await api("POST", "/whatif", { row_id: rowId, variable, value });
    const msg = `row ${rowId}: ${preview.previous.predicted_class} (${fmt(preview.previous.confidence, 3)}) ` +
      `-> ${preview.prediction.predicted_class} (${fmt(preview.prediction.confidence, 3)}). Commit?`;
    if (confirm(msg)) {
      await api("PATCH", "/generated/" + rowId, { variable, value });
      status("edited row " + rowId);
    }
    await loadBatch();
  });
}

async function loadHistory() {
  const entries = await api("GET", "/history");
  const rows = entries.map((e) => {
    const revert = document.createElement("button");
    revert.textContent = "revert";
    revert.onclick = () => mutate(async () => {
      await api("POST", "/revert", { index: e.index });
      await loadAll();
    });
    const kind = e.kind.type === "revert" ? `revert to ${e.kind.to}` : e.kind.type;
    return [e.index, kind, e.train_rows, e.batch_size, fmt(e.overall_rr), fmt(e.overall_cr), fmt(e.heldout_accuracy), revert];
  });
  place("history", table(["#", "kind", "train rows", "batch", "RR", "CR", "accuracy", ""], rows));
}

async function loadAll() {
  status("loading");
  await Promise.all([loadOverview(), loadVariables(), loadQuality(), loadBatch(), loadHistory()]);
  status("");
}

function readConstraints() {
  return JSON.parse($("constraints").value);
}

function showWarnings(warnings) {
  $("warnings").replaceChildren(
    ...warnings.map((w) => {
      const li = document.createElement("li");
      li.textContent = `${w.constraint.variable}: ${w.existing_count} matching rows for ${w.requested_count} requested (ratio ${fmt(w.ratio)})`;
      return li;
    })
  );
}

function showDrift(report) {
  const rows = report.variables.map((v) => [v.variable, fmt(v.score, 4), v.flagged ? "yes" : "no"]);
  place("drift-body", table(["variable", "drift", "flagged"], rows));
  $("drift").showModal();
}

$("reload").onclick = () => loadAll().catch((e) => status(e.message, true));
$("plan").onclick = () => mutate(async () => showWarnings((await api("POST", "/augment/plan", readConstraints())).warnings));
$("augment").onsubmit = (e) => {
  e.preventDefault();
  mutate(async () => {
    const reply = await api("POST", "/augment", { constraints: readConstraints(), seed: Number($("seed").value) });
    showWarnings(reply.summary.warnings);
    await loadAll();
  });
};
$("discard").onclick = () => mutate(async () => {
  await api("DELETE", "/generated");
  await loadAll();
});
$("retrain").onclick = () => mutate(async () => {
  try {
    await api("POST", "/retrain", { acknowledged: false });
  } catch (e) {
    if (e.code === "ACKNOWLEDGEMENT_REQUIRED") showDrift(e.detail);
    else throw e;
  }
});
$("drift-ack").onclick = () => mutate(async () => {
  $("drift").close();
  await api("POST", "/retrain", { acknowledged: true });
  await loadAll();
});
$("drift-cancel").onclick = () => $("drift").close();

loadAll().catch((e) => status(e.message, true));
