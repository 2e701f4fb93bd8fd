// DOM layer: renders the palette, hyperparameter form, verdict panel, script
// box and run chart into the page. Logic lives in state.ts; this file only
// reflects state and forwards events.

import type { CompatReport } from "./api.js";
import { lossChartSvg } from "./chart.js";
import type { PaletteGroup, SelectionState } from "./state.js";
import { canGenerate, violationsBySlot } from "./state.js";
import type { RunViewState } from "./runview.js";

export interface Handlers {
  onSelect(slot: string, option: string): void;
  onToggleLabelFree(): void;
  onHyperChange(name: string, value: string): void;
  onGenerate(): void;
  onRun(): void;
  onExport(): void;
  onImport(text: string): void;
}

const HYPER_FIELDS: Array<[string, string]> = [
  ["n_way", "ways (classes per task)"],
  ["k_shot", "shots per class"],
  ["lr_alpha", "fast-adaptation rate"],
  ["lr_beta", "meta rate"],
  ["inner_steps", "inner steps"],
  ["iterations", "meta-iterations"],
  ["meta_batch", "meta-batch size"],
  ["algorithm", "algorithm (blank = default)"],
];

export function renderOffline(root: HTMLElement, message: string): void {
  root.innerHTML =
    `<div class="banner error">service unreachable: ${escapeHtml(message)}. ` +
    `The palette is disabled until the composer service answers.</div>`;
}

export function renderApp(root: HTMLElement, palette: PaletteGroup[],
                          state: SelectionState, handlers: Handlers,
                          script: string | null, runState: RunViewState | null): void {
  const verdicts = violationsBySlot(state.lastReport);
  const groups = palette.map((group) => renderGroup(group, state, verdicts)).join("");
  const ready = canGenerate(state);
  const reportBox = renderReportBox(state.lastReport, state.notice);

  root.innerHTML = `
    <h1>metaforge composer</h1>
    <div class="palette">${groups}</div>
    <div class="modifiers">
      <label><input type="checkbox" id="label-free" ${state.labelFree ? "checked" : ""}/>
        label-free tasks (instance discrimination)</label>
    </div>
    <div class="hyper">${renderHyperForm(state)}</div>
    ${reportBox}
    <div class="actions">
      <button id="generate" ${ready ? "" : "disabled"}>Generate script</button>
      <button id="run" ${ready ? "" : "disabled"}>Run</button>
      <button id="export">Export config</button>
      <label class="import">Import config
        <input type="file" id="import" accept="application/json"/></label>
    </div>
    <pre id="script" class="script">${script ? escapeHtml(script) : ""}</pre>
    <div id="run-view">${runState ? renderRun(runState) : ""}</div>
    <textarea id="export-box" rows="8" hidden></textarea>
  `;

  for (const el of root.querySelectorAll<HTMLButtonElement>("button[data-slot]")) {
    el.addEventListener("click", () =>
      handlers.onSelect(el.dataset.slot as string, el.dataset.option as string));
  }
  root.querySelector<HTMLInputElement>("#label-free")!
    .addEventListener("change", handlers.onToggleLabelFree);
  for (const el of root.querySelectorAll<HTMLInputElement>("input[data-hyper]")) {
    el.addEventListener("change", () =>
      handlers.onHyperChange(el.dataset.hyper as string, el.value));
  }
  root.querySelector<HTMLButtonElement>("#generate")!
    .addEventListener("click", handlers.onGenerate);
  root.querySelector<HTMLButtonElement>("#run")!
    .addEventListener("click", handlers.onRun);
  root.querySelector<HTMLButtonElement>("#export")!
    .addEventListener("click", handlers.onExport);
  root.querySelector<HTMLInputElement>("#import")!
    .addEventListener("change", async (ev) => {
      const input = ev.target as HTMLInputElement;
      const file = input.files?.[0];
      if (file) handlers.onImport(await file.text());
    });
}

function renderGroup(group: PaletteGroup, state: SelectionState,
                     verdicts: Record<string, string[]>): string {
  const chosen = state.slots[group.slot];
  const options = group.options.map((opt) => {
    const active = chosen === opt.option ? " active" : "";
    const badge = opt.badge === "implemented" ? "" :
      `<span class="badge">${opt.badge}</span>`;
    return `<button data-slot="${group.slot}" data-option="${opt.option}"
      class="option${active}" title="${escapeHtml(opt.canonical)}">
      ${escapeHtml(opt.label)}${badge}</button>`;
  }).join("");
  const problems = (verdicts[group.slot] ?? []).map(
    (m) => `<div class="violation">${escapeHtml(m)}</div>`).join("");
  return `<section class="slot" data-slot-group="${group.slot}">
    <h2>${group.slot.replace(/_/g, " ")}</h2>${options}${problems}</section>`;
}

function renderHyperForm(state: SelectionState): string {
  return HYPER_FIELDS.map(([name, label]) => {
    const value = String((state.hyper as unknown as Record<string, unknown>)[name] ?? "");
    return `<label>${label}
      <input data-hyper="${name}" value="${escapeHtml(value)}"/></label>`;
  }).join("") +
    `<label>seed <input data-hyper="seed" value="${state.seed}"/></label>` +
    `<label>parallel workers <input data-hyper="parallel" value="${state.parallel}"/></label>` +
    `<label>first-order <input data-hyper="first_order" type="checkbox"
      ${state.hyper.first_order ? "checked" : ""}/></label>`;
}

function renderReportBox(report: CompatReport | null, notice: string | null): string {
  const noticeHtml = notice ? `<div class="banner notice">${escapeHtml(notice)}</div>` : "";
  if (!report) {
    return `${noticeHtml}<div class="banner pending">pick options to validate</div>`;
  }
  if (report.ok) {
    return `${noticeHtml}<div class="banner ok">compatible: ready to generate</div>`;
  }
  return noticeHtml + `<div class="banner error">` +
    report.violations.map((v) => escapeHtml(`${v.rule}: ${v.message}`)).join("<br/>") +
    `</div>`;
}

function renderRun(run: RunViewState): string {
  const chart = lossChartSvg(run.series);
  const summary = run.report
    ? renderFinalCard(run.report)
    : "";
  return `<h2>run ${run.id} (${run.status})</h2>${chart}${summary}` +
    (run.error ? `<div class="banner error">${escapeHtml(run.error)}</div>` : "");
}

function renderFinalCard(report: Record<string, unknown>): string {
  const ev = (report.eval ?? {}) as Record<string, unknown>;
  return `<div class="card">
    <div>pre-adaptation: ${String(ev.pre)}</div>
    <div>post-adaptation: ${String(ev.post)}</div>
    <div>wall seconds: ${String(report.wall_seconds)}</div>
  </div>`;
}

function escapeHtml(text: string): string {
  return text.replace(/[&<>"']/g, (ch) => ({
    "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&#39;",
  }[ch] as string));
}
