/** Interactive panel: per-structure sliders driving live dose predictions,
 * DVH overlay of current vs previous prediction, axial slice heatmap, and
 * the objectives -> plan hand-off with a streaming log pane.
 *
 * Every displayed number originates from an engine response; the UI never
 * derives dosimetric quantities itself.
 */

import { EngineClient, EngineError, PredictResponse, SessionInfo } from "./api.js";
import { drawDvhChart, drawSliceHeatmap, structureColor } from "./charts.js";
import { debounce, LatestOnly } from "./debounce.js";

export const PREDICT_DEBOUNCE_MS = 150;

export interface SliderPanelState {
  sessionId: string | null;
  caseId: string | null;
  hiTarget: Record<string, number>;
  oarWeight: Record<string, number>;
  busy: boolean;
  hasPrediction: boolean;
}

export interface AppOptions {
  client: EngineClient;
  root: HTMLElement;
  storage?: Pick<Storage, "getItem" | "setItem" | "removeItem">;
  debounceMs?: number;
}

export class App {
  readonly state: SliderPanelState = {
    sessionId: null,
    caseId: null,
    hiTarget: {},
    oarWeight: {},
    busy: false,
    hasPrediction: false,
  };
  predictRequests = 0;

  private client: EngineClient;
  private root: HTMLElement;
  private storage: Pick<Storage, "getItem" | "setItem" | "removeItem"> | null;
  private latest = new LatestOnly<PredictResponse>();
  session: SessionInfo | null = null;
  /** Overlay data handed to the last chart draw (current solid, previous dashed). */
  lastOverlay: { current: Record<string, unknown>; previous: Record<string, unknown> | null } | null = null;
  private lastResponse: PredictResponse | null = null;
  private schedulePredict: ReturnType<typeof debounce<[]>>;

  constructor(opts: AppOptions) {
    this.client = opts.client;
    this.root = opts.root;
    this.storage = opts.storage ?? null;
    this.schedulePredict = debounce(() => this.predictNow(), opts.debounceMs ?? PREDICT_DEBOUNCE_MS);
    this.renderSkeleton();
  }

  // ---------------------------------------------------------------- layout

  private el<T extends HTMLElement>(id: string): T {
    const node = this.root.querySelector(`#${id}`);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
  }

  private renderSkeleton(): void {
    this.root.innerHTML = `
      <div class="toolbar">
        <input id="seed-input" type="number" value="7" title="phantom seed">
        <button id="btn-load">Load case</button>
        <button id="btn-objectives" disabled>Extract objectives</button>
        <button id="btn-plan" disabled>Run plan</button>
        <span id="status"></span>
      </div>
      <div class="columns">
        <div id="sliders" class="sliders"></div>
        <div class="charts">
          <canvas id="dvh-canvas" width="520" height="320"></canvas>
          <canvas id="slice-canvas" width="256" height="256"></canvas>
        </div>
      </div>
      <div id="metrics" class="metrics"></div>
      <pre id="log" class="log"></pre>
      <div id="toast" class="toast" hidden></div>
    `;
    this.el<HTMLButtonElement>("btn-load").addEventListener("click", () => {
      const seed = Number(this.el<HTMLInputElement>("seed-input").value);
      void this.loadCase({ phantom_seed: seed });
    });
    this.el<HTMLButtonElement>("btn-objectives").addEventListener("click", () => {
      void this.extractObjectives();
    });
    this.el<HTMLButtonElement>("btn-plan").addEventListener("click", () => {
      void this.runPlan();
    });
  }

  toast(message: string): void {
    const node = this.el<HTMLDivElement>("toast");
    node.textContent = message;
    node.hidden = false;
  }

  log(line: string): void {
    this.el<HTMLPreElement>("log").textContent += line + "\n";
  }

  private setBusy(busy: boolean): void {
    this.state.busy = busy;
    for (const input of this.root.querySelectorAll<HTMLInputElement>("input[type=range]")) {
      input.disabled = busy;
    }
  }

  // ----------------------------------------------------------------- steps

  async loadCase(source: { bundle_path?: string; phantom_seed?: number }): Promise<void> {
    try {
      const session = await this.client.createSession(source);
      this.adoptSession(session);
      this.storage?.setItem("fdp-session", JSON.stringify({ source, session_id: session.session_id }));
      this.log(`loaded ${session.case_id} as ${session.session_id}`);
      this.schedulePredict();
    } catch (err) {
      this.toast(err instanceof EngineError ? err.message : String(err));
    }
  }

  /** Restore the previous session source from local storage, if any. */
  async restoreLastSession(): Promise<boolean> {
    const raw = this.storage?.getItem("fdp-session");
    if (!raw) return false;
    try {
      const { source } = JSON.parse(raw) as { source: { phantom_seed?: number } };
      await this.loadCase(source);
      return this.state.sessionId !== null;
    } catch {
      this.storage?.removeItem("fdp-session");
      return false;
    }
  }

  private adoptSession(session: SessionInfo): void {
    this.session = session;
    this.state.sessionId = session.session_id;
    this.state.caseId = session.case_id;
    this.state.hasPrediction = false;
    this.lastResponse = null;
    this.latest.invalidate();
    this.state.hiTarget = {};
    this.state.oarWeight = {};
    const [hiLo, hiHi] = session.slider_ranges.hi;
    const [wLo, wHi] = session.slider_ranges.oar_weight;
    const panel = this.el<HTMLDivElement>("sliders");
    panel.innerHTML = "";
    session.structures.forEach((s, i) => {
      const isPtv = s.kind === "PTV";
      const lo = isPtv ? hiLo : wLo;
      const hi = isPtv ? hiHi : wHi;
      const mid = isPtv ? 0.08 : 1.0;
      if (isPtv) this.state.hiTarget[s.name] = mid;
      else this.state.oarWeight[s.name] = mid;
      const row = document.createElement("div");
      row.className = "slider-row";
      const label = document.createElement("label");
      label.textContent = isPtv ? `${s.name} homogeneity` : `${s.name} sparing`;
      label.style.color = structureColor(i);
      const input = document.createElement("input");
      input.type = "range";
      input.min = String(lo);
      input.max = String(hi);
      input.step = String((hi - lo) / 100);
      input.value = String(mid);
      input.dataset.structure = s.name;
      input.dataset.kind = s.kind;
      const valueSpan = document.createElement("span");
      valueSpan.className = "slider-value";
      valueSpan.textContent = String(mid);
      input.addEventListener("input", () => {
        const v = Number(input.value);
        valueSpan.textContent = input.value;
        if (isPtv) this.state.hiTarget[s.name] = v;
        else this.state.oarWeight[s.name] = v;
        this.schedulePredict();
      });
      row.append(label, input, valueSpan);
      panel.append(row);
    });
    this.el<HTMLButtonElement>("btn-objectives").disabled = false;
    this.el<HTMLButtonElement>("btn-plan").disabled = false;
  }

  private async predictNow(): Promise<void> {
    if (!this.state.sessionId) return;
    this.predictRequests += 1;
    this.setBusy(true);
    await this.latest.dispatch(
      this.client.predict(this.state.sessionId, this.state.hiTarget, this.state.oarWeight),
      (resp) => {
        this.lastResponse = resp;
        this.state.hasPrediction = true;
        this.renderPrediction(resp);
        this.setBusy(false);
      },
      (err) => {
        this.setBusy(false);
        this.toast(err instanceof EngineError ? err.message : String(err));
      },
    );
  }

  private renderPrediction(resp: PredictResponse): void {
    this.lastOverlay = { current: resp.dvh, previous: resp.previous_dvh };
    drawDvhChart(this.el<HTMLCanvasElement>("dvh-canvas"), {
      current: resp.dvh,
      previous: resp.previous_dvh,
    });
    drawSliceHeatmap(this.el<HTMLCanvasElement>("slice-canvas"), resp.slice);
    const metrics = this.el<HTMLDivElement>("metrics");
    metrics.innerHTML = "";
    for (const name of Object.keys(resp.metrics).sort()) {
      const entry = resp.metrics[name];
      const div = document.createElement("div");
      div.dataset.structure = name;
      const parts = Object.keys(entry)
        .sort()
        .map((key) => `${key}=<span data-metric="${name}.${key}">${String(entry[key])}</span>`);
      div.innerHTML = `<b>${name}</b> ${parts.join(" ")}`;
      metrics.append(div);
    }
    this.el<HTMLSpanElement>("status").textContent = `forward ${String(resp.latency_ms)} ms`;
  }

  async extractObjectives(): Promise<void> {
    if (!this.state.hasPrediction) {
      this.log("guidance: run a prediction first (move a slider), then extract objectives");
      return;
    }
    try {
      const result = await this.client.extractObjectives(this.state.sessionId!);
      this.log(`objectives extracted: ${result.objectives.length}`);
      this.log(result.text.trimEnd());
    } catch (err) {
      if (err instanceof EngineError && err.status === 409) {
        this.log("guidance: " + err.message);
      } else {
        this.toast(String(err));
      }
    }
  }

  async runPlan(): Promise<void> {
    if (!this.state.hasPrediction) {
      this.log("guidance: run a prediction first (move a slider), then plan");
      return;
    }
    try {
      const result = await this.client.runPlan(this.state.sessionId!, (line) => this.log(line));
      this.log(`plan finished: penalty=${String(result.total_penalty)} `
        + `iterations=${String(result.iterations)}`);
      // achieved vs expected overlay reuses the DVH chart: achieved solid, expected dashed
      this.lastOverlay = { current: result.achieved_dvh, previous: result.expected_dvh };
      drawDvhChart(this.el<HTMLCanvasElement>("dvh-canvas"), {
        current: result.achieved_dvh,
        previous: result.expected_dvh,
      });
    } catch (err) {
      if (err instanceof EngineError && err.status === 409) {
        this.log("guidance: " + err.message);
      } else {
        this.toast(String(err));
      }
    }
  }

  /** Test hook: flush a pending debounced predict immediately. */
  flushPendingPredict(): void {
    this.schedulePredict.flush();
  }

  lastPrediction(): PredictResponse | null {
    return this.lastResponse;
  }
}

export function mountApp(opts: AppOptions): App {
  return new App(opts);
}
