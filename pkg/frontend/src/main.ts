// Application wiring: fetch the registry, keep the selection state validated
// against the service after every change, and drive generation and runs.

import { ServiceClient } from "./api.js";
import type { ConfigDocument } from "./api.js";
import { renderApp, renderOffline } from "./render.js";
import { RunView } from "./runview.js";
import type { RunViewState } from "./runview.js";
import {
  LatestWins,
  applyVerdict,
  autoFixFromVerdict,
  importConfig,
  newState,
  paletteModel,
  selectOption,
  toConfigDocument,
  toggleLabelFree,
  allSlotsChosen,
} from "./state.js";
import type { PaletteGroup, SelectionState } from "./state.js";

const client = new ServiceClient("");
const validations = new LatestWins<ReturnType<ServiceClient["validate"]> extends Promise<infer T> ? T : never>();

let palette: PaletteGroup[] = [];
let state: SelectionState;
let script: string | null = null;
let runView: RunView | null = null;
let runState: RunViewState | null = null;

function draw(): void {
  const root = document.getElementById("app");
  if (!root) return;
  renderApp(root, palette, state, handlers, script, runState);
}

async function revalidate(): Promise<void> {
  if (!allSlotsChosen(state)) {
    draw();
    return;
  }
  const doc = toConfigDocument(state);
  const report = await validations.run(() => client.validate(doc));
  if (report === null) return; // a newer validation superseded this one
  const fixed = autoFixFromVerdict(state, report);
  if (fixed) {
    state = fixed;
    draw();
    await revalidate();
    return;
  }
  state = applyVerdict(state, report);
  draw();
}

const handlers = {
  onSelect(slot: string, option: string): void {
    state = selectOption(state, slot, option);
    script = null;
    void revalidate();
  },
  onToggleLabelFree(): void {
    state = toggleLabelFree(state);
    script = null;
    void revalidate();
  },
  onHyperChange(name: string, value: string): void {
    if (name === "seed") state = { ...state, seed: Number(value) || 0 };
    else if (name === "parallel") state = { ...state, parallel: Number(value) || 1 };
    else if (name === "first_order") {
      state = { ...state, hyper: { ...state.hyper, first_order: !state.hyper.first_order } };
    } else if (name === "algorithm") {
      state = { ...state, hyper: { ...state.hyper, algorithm: value.trim() } };
    } else {
      const parsed = Number(value);
      if (!Number.isNaN(parsed)) {
        state = { ...state, hyper: { ...state.hyper, [name]: parsed } };
      }
    }
    script = null;
    void revalidate();
  },
  async onGenerate(): Promise<void> {
    try {
      script = await client.generate(toConfigDocument(state));
    } catch (err) {
      script = null;
      state = { ...state, notice: `generate failed: ${String(err)}` };
    }
    draw();
  },
  async onRun(): Promise<void> {
    try {
      const id = await client.launch(toConfigDocument(state));
      runView?.stop();
      runView = new RunView(client, id, (s) => {
        runState = s;
        draw();
      });
      runView.start();
    } catch (err) {
      state = { ...state, notice: `run launch failed: ${String(err)}` };
      draw();
    }
  },
  onExport(): void {
    const doc = toConfigDocument(state);
    const box = document.getElementById("export-box") as HTMLTextAreaElement | null;
    if (box) {
      box.hidden = false;
      box.value = JSON.stringify(doc, null, 2);
    }
  },
  onImport(text: string): void {
    try {
      state = importConfig(state, JSON.parse(text) as ConfigDocument);
      script = null;
      void revalidate();
    } catch (err) {
      state = { ...state, notice: `import failed: ${String(err)}` };
      draw();
    }
  },
};

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) return;
  try {
    const modules = await client.modules();
    palette = paletteModel(modules);
    state = newState(modules.slots);
  } catch (err) {
    renderOffline(root, String(err));
    return;
  }
  draw();
}

void boot();
