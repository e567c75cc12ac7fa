/**
 * DOM glue for the studio page.  All logic lives in the api/state/polling/
 * grid modules; this file only binds widgets.  Pixels are never touched:
 * every <img> gets an object URL wrapping the exact bytes the server sent.
 */

import { ApiClient, ParamEcho } from "./api.js";
import { GridView, cellParams, loadGrid } from "./grid.js";
import { PollRegistry } from "./polling.js";
import { SessionState } from "./state.js";
import { runExtraction } from "./workflow.js";

const client = new ApiClient("");
const state = new SessionState();
const polls = new PollRegistry();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function pngUrl(bytes: ArrayBuffer): string {
  return URL.createObjectURL(new Blob([bytes], { type: "image/png" }));
}

function banner(message: string, kind: "error" | "info" = "error"): void {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.className = message ? `banner ${kind}` : "banner hidden";
}

function describeEcho(params: ParamEcho): string {
  return `zeta=${params.zeta} beta=${params.beta} alpha=${params.alpha} method=${params.method} steps=${params.steps}`;
}

function bindSlider(name: "zeta" | "beta" | "alpha"): void {
  const slider = el<HTMLInputElement>(`${name}-slider`);
  const readout = el<HTMLOutputElement>(`${name}-value`);
  slider.addEventListener("input", () => {
    const value = state.setSlider(name, Number(slider.value));
    readout.value = value.toFixed(2);
  });
  state.subscribe(() => {
    const value = state.sliders[name];
    slider.value = String(value);
    readout.value = value.toFixed(2);
  });
}

function bindUpload(id: "color" | "reference"): void {
  el<HTMLInputElement>(`${id}-file`).addEventListener("change", (event) => {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    state.setImages(id === "color" ? file : undefined, id === "reference" ? file : undefined);
    const preview = el<HTMLImageElement>(`${id}-preview`);
    preview.src = URL.createObjectURL(file);
    preview.hidden = false;
  });
}

function renderHistory(): void {
  const list = el<HTMLUListElement>("history");
  list.replaceChildren(
    ...state.history.map((entry) => {
      const item = document.createElement("li");
      item.dataset.jobId = entry.jobId;
      const caption = document.createElement("span");
      caption.textContent =
        entry.status === "done"
          ? `${entry.jobId} — ${describeEcho(entry.echoed)}`
          : `${entry.jobId} — ${entry.status}${entry.error ? `: ${entry.error}` : ""}`;
      item.append(caption);
      if (entry.thumbnail) {
        const img = document.createElement("img");
        img.src = pngUrl(entry.thumbnail);
        img.width = 96;
        img.alt = entry.jobId;
        img.addEventListener("click", () => {
          el<HTMLImageElement>("result-image").src = img.src;
          state.loadSliders({ zeta: entry.echoed.zeta, beta: entry.echoed.beta, alpha: entry.echoed.alpha });
        });
        item.append(img);
      }
      return item;
    }),
  );
}

async function submitJob(): Promise<void> {
  banner("");
  const final = await runExtraction(
    client,
    state,
    polls,
    {
      method: el<HTMLSelectElement>("method-select").value,
      steps: Number(el<HTMLInputElement>("steps-input").value) || 50,
    },
    {
      onTransient: (message) => banner(message, "info"),
      onError: (message) => banner(message),
      onDone: (jobId, bytes) => {
        el<HTMLImageElement>("result-image").src = pngUrl(bytes);
        const entry = state.history.find((e) => e.jobId === jobId);
        if (entry) el<HTMLParagraphElement>("result-params").textContent = describeEcho(entry.echoed);
        banner("");
      },
    },
  );
  void final;
}

function renderGrid(view: GridView): void {
  const table = el<HTMLTableElement>("grid-table");
  table.replaceChildren();
  const header = table.insertRow();
  header.insertCell().textContent = "zeta \\ beta";
  for (const beta of view.betaValues) {
    const th = document.createElement("th");
    th.textContent = beta.toFixed(2);
    header.append(th);
  }
  view.cells.forEach((row, i) => {
    const tr = table.insertRow();
    const th = document.createElement("th");
    th.textContent = view.zetaValues[i]!.toFixed(2);
    tr.append(th);
    row.forEach((cell, j) => {
      const td = tr.insertCell();
      td.dataset.cell = `${i}/${j}`;
      if (cell.state === "ready" && cell.bytes) {
        const img = document.createElement("img");
        img.src = pngUrl(cell.bytes);
        img.width = 72;
        img.alt = `zeta ${cell.zeta}, beta ${cell.beta}`;
        img.addEventListener("click", () => {
          // the steering loop: explore the matrix, commit a cell to the sliders
          state.loadSliders(cellParams(view, i, j));
        });
        td.append(img);
      } else if (cell.state === "error") {
        td.textContent = "unavailable";
        td.title = cell.error ?? "";
        td.className = "cell-error";
      } else {
        td.textContent = "…";
      }
    });
  });
}

async function submitGrid(): Promise<void> {
  if (!state.color || !state.reference) return;
  banner("");
  const parse = (id: string) =>
    el<HTMLInputElement>(id)
      .value.split(",")
      .map((v) => Number(v.trim()))
      .filter((v) => !Number.isNaN(v));
  try {
    const submitted = await client.submitGrid(state.color, state.reference, parse("grid-zetas"), parse("grid-betas"), {
      method: el<HTMLSelectElement>("method-select").value,
      steps: Number(el<HTMLInputElement>("steps-input").value) || 50,
      alpha: state.sliders.alpha,
    });
    const status = await polls.pollGrid(client, submitted.grid_id);
    if (status.status !== "done") {
      banner(status.error ?? "grid failed");
      return;
    }
    const view = await loadGrid(client, status, () => undefined);
    renderGrid(view);
  } catch (err) {
    banner(err instanceof Error ? err.message : String(err));
  }
}

async function init(): Promise<void> {
  bindSlider("zeta");
  bindSlider("beta");
  bindSlider("alpha");
  bindUpload("color");
  bindUpload("reference");
  state.subscribe(() => {
    el<HTMLButtonElement>("submit-job").disabled = !state.canSubmit();
    el<HTMLButtonElement>("submit-grid").disabled = !state.canSubmit();
    renderHistory();
  });
  el<HTMLButtonElement>("submit-job").addEventListener("click", () => void submitJob());
  el<HTMLButtonElement>("submit-grid").addEventListener("click", () => void submitGrid());
  try {
    const caps = await client.capabilities();
    const select = el<HTMLSelectElement>("method-select");
    select.replaceChildren(
      ...caps.detectors.map((name) => {
        const option = document.createElement("option");
        option.value = name;
        option.textContent = name;
        option.selected = name === caps.defaults.method || (name === "canny" && !caps.detectors.includes(caps.defaults.method));
        return option;
      }),
    );
    state.loadSliders(caps.defaults);
  } catch {
    banner("server unreachable; is `mixsa serve` running?");
  }
}

if (typeof document !== "undefined") {
  void init();
}
