// Live-session console: one session per view, state advances only on user
// action, and every rendered value mirrors the latest service snapshot.

import { ApiError, SessionClient, SessionSnapshot } from "./api.js";
import { renderTrajectory } from "./chart.js";

export class AppView {
    snapshot: SessionSnapshot | null = null;
    busy = false;
    errorMessage: string | null = null;

    constructor(
        private readonly root: HTMLElement,
        private readonly client: SessionClient,
    ) {
        this.root.innerHTML = TEMPLATE;
        this.el("start-btn").addEventListener("click", () => void this.start());
        this.el("retry-btn").addEventListener("click", () => void this.start());
        this.el("btn-correct").addEventListener("click", () => void this.record(true));
        this.el("btn-incorrect").addEventListener("click", () => void this.record(false));
        this.render();
    }

    el(id: string): HTMLElement {
        const node = this.root.querySelector(`#${id}`);
        if (!node) {
            throw new Error(`missing element #${id}`);
        }
        return node as HTMLElement;
    }

    async start(): Promise<void> {
        if (this.busy) {
            return;
        }
        this.busy = true;
        this.render();
        try {
            this.snapshot = await this.client.createSession();
            this.errorMessage = null;
        } catch (err) {
            // no stale state: a failed start leaves the view session-less
            this.snapshot = null;
            this.errorMessage = describe(err);
        } finally {
            this.busy = false;
            this.render();
        }
    }

    async record(correct: boolean): Promise<void> {
        const snap = this.snapshot;
        // the busy flag is the double-submission guard: while a request is in
        // flight every further click is dropped, not queued
        if (!snap || snap.status !== "active" || this.busy) {
            return;
        }
        this.busy = true;
        this.render();
        try {
            this.snapshot = await this.client.submitResponse(
                snap.id,
                correct ? 1 : 0,
                snap.response_count,
            );
            this.errorMessage = null;
        } catch (err) {
            if (err instanceof ApiError && err.status === 409) {
                // lost a race: re-sync with the authoritative snapshot
                this.snapshot = await this.client.getSession(snap.id);
                this.errorMessage = null;
            } else {
                this.errorMessage = describe(err);
            }
        } finally {
            this.busy = false;
            this.render();
        }
    }

    render(): void {
        const snap = this.snapshot;
        this.el("retry-banner").hidden = this.errorMessage === null;
        this.el("retry-message").textContent = this.errorMessage ?? "";
        this.el("start-panel").hidden = snap !== null;
        this.el("session-panel").hidden = snap === null;
        (this.el("start-btn") as HTMLButtonElement).disabled = this.busy;
        if (!snap) {
            return;
        }

        this.el("session-id").textContent = snap.id;
        this.el("progress").textContent = `${snap.response_count} / ${snap.horizon}`;

        const item = snap.recommended_item;
        this.el("recommendation").hidden = item === null;
        if (item) {
            this.el("item-index").textContent = `#${item.index}`;
            this.el("item-difficulty").textContent = item.difficulty.toFixed(2);
            this.el("item-band").textContent = item.band;
            this.el("item-band").setAttribute("data-band", item.band);
        }

        const active = snap.status === "active";
        (this.el("btn-correct") as HTMLButtonElement).disabled = this.busy || !active;
        (this.el("btn-incorrect") as HTMLButtonElement).disabled = this.busy || !active;

        this.el("completed-banner").hidden = active;
        const last = snap.trajectory[snap.trajectory.length - 1];
        this.el("final-estimate").textContent =
            snap.trajectory.length > 0 ? (last as number).toFixed(2) : "-";

        renderTrajectory(this.el("trajectory") as unknown as SVGSVGElement, snap.trajectory);

        const tbody = this.el("history-body");
        tbody.innerHTML = "";
        for (const row of snap.history) {
            const tr = document.createElement("tr");
            tr.innerHTML =
                `<td>${row.step}</td><td>#${row.item_index}</td>` +
                `<td>${row.difficulty.toFixed(2)}</td>` +
                `<td>${row.outcome === 1 ? "correct" : "incorrect"}</td>` +
                `<td>${row.estimate.toFixed(2)}</td>`;
            tbody.appendChild(tr);
        }
    }
}

function describe(err: unknown): string {
    if (err instanceof ApiError) {
        return `${err.code}: ${err.message}`;
    }
    return "service unreachable";
}

const TEMPLATE = `
<div class="console">
  <div id="retry-banner" class="banner banner-error" hidden>
    <span id="retry-message"></span>
    <button id="retry-btn">retry</button>
  </div>

  <section id="start-panel">
    <h1>Adaptive testing console</h1>
    <p>Start a session to get the first recommended item.</p>
    <button id="start-btn" class="primary">Start session</button>
  </section>

  <section id="session-panel" hidden>
    <header>
      <h1>Session <code id="session-id"></code></h1>
      <div class="progress">responses: <strong id="progress"></strong></div>
    </header>

    <div id="recommendation" class="card">
      <h2>Next item</h2>
      <div class="item">
        <span id="item-index" class="item-index"></span>
        <span>difficulty <strong id="item-difficulty"></strong></span>
        <span id="item-band" class="band"></span>
      </div>
      <div class="actions">
        <button id="btn-correct" class="primary">Correct</button>
        <button id="btn-incorrect">Incorrect</button>
      </div>
    </div>

    <div id="completed-banner" class="banner banner-done" hidden>
      Session complete. Final ability estimate:
      <strong id="final-estimate"></strong>
    </div>

    <div class="card">
      <h2>Ability estimate trajectory</h2>
      <svg id="trajectory" class="chart" role="img"></svg>
    </div>

    <div class="card">
      <h2>Responses</h2>
      <table>
        <thead>
          <tr><th>step</th><th>item</th><th>difficulty</th><th>outcome</th><th>estimate</th></tr>
        </thead>
        <tbody id="history-body"></tbody>
      </table>
    </div>
  </section>
</div>
`;
