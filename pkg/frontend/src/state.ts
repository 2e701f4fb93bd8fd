// Slot-selection state and the gating rules around it. All compatibility
// knowledge lives on the server; this module only reacts to its verdicts.

import type { CompatReport, ConfigDocument, ModuleDescriptor, ModulesResponse } from "./api.js";

export interface HyperForm {
  n_way: number;
  k_shot: number;
  lr_alpha: number;
  lr_beta: number;
  inner_steps: number;
  iterations: number;
  meta_batch: number;
  first_order: boolean;
  algorithm: string;
}

export interface SelectionState {
  slotNames: string[];
  slots: Record<string, string | null>;
  labelFree: boolean;
  hyper: HyperForm;
  seed: number;
  parallel: number;
  lastReport: CompatReport | null;
  notice: string | null;
}

export const DEFAULT_HYPER: HyperForm = {
  n_way: 5,
  k_shot: 1,
  lr_alpha: 0.01,
  lr_beta: 0.001,
  inner_steps: 1,
  iterations: 100,
  meta_batch: 4,
  first_order: false,
  algorithm: "",
};

export function newState(slotNames: string[]): SelectionState {
  const slots: Record<string, string | null> = {};
  for (const name of slotNames) slots[name] = null;
  return {
    slotNames,
    slots,
    labelFree: false,
    hyper: { ...DEFAULT_HYPER },
    seed: 0,
    parallel: 1,
    lastReport: null,
    notice: null,
  };
}

export function selectOption(state: SelectionState, slot: string, option: string): SelectionState {
  if (!(slot in state.slots)) throw new Error(`unknown slot '${slot}'`);
  return { ...state, slots: { ...state.slots, [slot]: option }, lastReport: null, notice: null };
}

export function toggleLabelFree(state: SelectionState): SelectionState {
  return { ...state, labelFree: !state.labelFree, lastReport: null, notice: null };
}

export function allSlotsChosen(state: SelectionState): boolean {
  return state.slotNames.every((name) => state.slots[name] !== null);
}

/** Generate/Run are enabled exactly when every slot is filled and the latest
    server verdict is clean. */
export function canGenerate(state: SelectionState): boolean {
  return allSlotsChosen(state) && state.lastReport !== null && state.lastReport.ok;
}

export function toConfigDocument(state: SelectionState): ConfigDocument {
  if (!allSlotsChosen(state)) throw new Error("config export needs every slot chosen");
  const slots: Record<string, string> = {};
  for (const name of state.slotNames) slots[name] = state.slots[name] as string;
  const hyper: Record<string, unknown> = {
    n_way: state.hyper.n_way,
    k_shot: state.hyper.k_shot,
    lr_alpha: state.hyper.lr_alpha,
    lr_beta: state.hyper.lr_beta,
    inner_steps: state.hyper.inner_steps,
    iterations: state.hyper.iterations,
    meta_batch: state.hyper.meta_batch,
    first_order: state.hyper.first_order,
  };
  if (state.hyper.algorithm) hyper.algorithm = state.hyper.algorithm;
  return {
    slots,
    modifiers: state.labelFree ? ["label_free"] : [],
    hyper,
    seed: state.seed,
    parallel: state.parallel,
  };
}

export function importConfig(state: SelectionState, doc: ConfigDocument): SelectionState {
  const slots: Record<string, string | null> = { ...state.slots };
  for (const name of state.slotNames) {
    if (doc.slots[name] !== undefined) slots[name] = doc.slots[name];
  }
  const hyper = { ...state.hyper };
  const src = doc.hyper ?? {};
  for (const key of Object.keys(DEFAULT_HYPER) as (keyof HyperForm)[]) {
    if (src[key] !== undefined) (hyper as Record<string, unknown>)[key] = src[key];
  }
  return {
    ...state,
    slots,
    labelFree: (doc.modifiers ?? []).includes("label_free"),
    hyper,
    seed: doc.seed ?? 0,
    parallel: doc.parallel ?? 1,
    lastReport: null,
    notice: null,
  };
}

export function applyVerdict(state: SelectionState, report: CompatReport): SelectionState {
  return { ...state, lastReport: report };
}

/** Server-driven convenience: when the verdict says the label-free modifier
    conflicts with the chosen loss (rule R2), switch the loss slot to the
    contrastive option and tell the user. No local rule knowledge involved:
    the trigger and the wording both come from the violation itself. */
export function autoFixFromVerdict(state: SelectionState, report: CompatReport): SelectionState | null {
  if (!state.labelFree) return null;
  const hit = report.violations.find(
    (v) => v.rule === "R2" && v.slots.includes("base_learner"));
  if (!hit || state.slots.base_learner === "contrastive") return null;
  return {
    ...state,
    slots: { ...state.slots, base_learner: "contrastive" },
    lastReport: null,
    notice: `loss switched to contrastive (${hit.rule}: ${hit.message})`,
  };
}

/** Violation strings grouped by the slot they blame, verbatim. */
export function violationsBySlot(report: CompatReport | null): Record<string, string[]> {
  const out: Record<string, string[]> = {};
  if (!report) return out;
  for (const v of report.violations) {
    for (const slot of v.slots) {
      (out[slot] ??= []).push(`${v.rule}: ${v.message}`);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// palette view-model

export interface PaletteOption {
  option: string;
  label: string;
  canonical: string;
  badge: "implemented" | "registered, unimplemented";
}

export interface PaletteGroup {
  slot: string;
  options: PaletteOption[];
}

export function paletteModel(modules: ModulesResponse): PaletteGroup[] {
  if (!modules.descriptors.length) {
    throw new Error("registry returned no descriptors");
  }
  const bySlot = new Map<string, ModuleDescriptor[]>();
  for (const d of modules.descriptors) {
    const list = bySlot.get(d.slot) ?? [];
    list.push(d);
    bySlot.set(d.slot, list);
  }
  return modules.slots.map((slot) => ({
    slot,
    options: (bySlot.get(slot) ?? []).map((d) => ({
      option: d.option,
      label: d.name,
      canonical: d.canonical,
      badge: d.implemented ? "implemented" : "registered, unimplemented",
    })),
  }));
}

// ---------------------------------------------------------------------------
// latest-wins validation: stale responses are dropped

export class LatestWins<T> {
  private token = 0;

  async run(work: () => Promise<T>): Promise<T | null> {
    const mine = ++this.token;
    const result = await work();
    return mine === this.token ? result : null;
  }
}
