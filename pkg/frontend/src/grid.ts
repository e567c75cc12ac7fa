/**
 * Grid view-model: a zeta x beta matrix of thumbnails fetched with a small
 * concurrency cap.  Clicking a cell feeds its (zeta, beta) back into the
 * sliders; failed cells render as placeholders without sinking the grid.
 */

import { ApiClient, GridStatusResponse } from "./api.js";

export type CellState = "loading" | "ready" | "error";

export interface GridCell {
  i: number;
  j: number;
  zeta: number;
  beta: number;
  state: CellState;
  /** PNG bytes exactly as served; undefined while loading or on error */
  bytes?: ArrayBuffer;
  error?: string;
}

export interface GridView {
  gridId: string;
  zetaValues: number[];
  betaValues: number[];
  cells: GridCell[][];
}

export function cellParams(view: GridView, i: number, j: number): { zeta: number; beta: number } {
  const zeta = view.zetaValues[i];
  const beta = view.betaValues[j];
  if (zeta === undefined || beta === undefined) {
    throw new RangeError(`no cell (${i}, ${j}) in a ${view.zetaValues.length}x${view.betaValues.length} grid`);
  }
  return { zeta, beta };
}

async function mapWithConcurrency<T>(
  tasks: (() => Promise<T>)[],
  limit: number,
): Promise<void> {
  let next = 0;
  const workers = Array.from({ length: Math.max(1, Math.min(limit, tasks.length)) }, async () => {
    for (;;) {
      const index = next++;
      const task = tasks[index];
      if (!task) return;
      await task();
    }
  });
  await Promise.all(workers);
}

export async function loadGrid(
  client: ApiClient,
  status: GridStatusResponse,
  onCell?: (cell: GridCell) => void,
  concurrency = 4,
): Promise<GridView> {
  const view: GridView = {
    gridId: status.grid_id,
    zetaValues: [...status.zeta_values],
    betaValues: [...status.beta_values],
    cells: status.zeta_values.map((zeta, i) =>
      status.beta_values.map((beta, j) => ({ i, j, zeta, beta, state: "loading" as CellState })),
    ),
  };
  const tasks: (() => Promise<void>)[] = [];
  for (let i = 0; i < view.zetaValues.length; i++) {
    for (let j = 0; j < view.betaValues.length; j++) {
      tasks.push(async () => {
        const cell = view.cells[i]![j]!;
        try {
          cell.bytes = await client.gridCell(view.gridId, i, j);
          cell.state = "ready";
        } catch (err) {
          cell.state = "error";
          cell.error = err instanceof Error ? err.message : String(err);
        }
        onCell?.(cell);
      });
    }
  }
  await mapWithConcurrency(tasks, concurrency);
  return view;
}
