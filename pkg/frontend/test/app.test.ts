// @vitest-environment jsdom
import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { EngineClient } from "../src/api.js";
import { App } from "../src/app.js";

function fakeCurve(level: number) {
  const volume_fraction = Array.from({ length: 101 }, (_, k) => k / 100);
  const dose_gy = volume_fraction.map((f) => level * (1 - f));
  return { volume_fraction, dose_gy };
}

interface EngineLog {
  predicts: Array<{ hi_target: Record<string, number>; oar_weight: Record<string, number> }>;
}

function fakeEngine(log: EngineLog): typeof fetch {
  let predictCount = 0;
  return (async (url: RequestInfo | URL, init?: RequestInit) => {
    const path = String(url);
    const body = init?.body ? JSON.parse(String(init.body)) : {};
    const json = (status: number, payload: unknown) =>
      new Response(JSON.stringify(payload), {
        status,
        headers: { "content-type": "application/json" },
      });
    if (path.endsWith("/cases")) {
      return json(201, {
        session_id: "s000001",
        case_id: `phantom-${body.phantom_seed}`,
        structures: [
          { name: "ptv_1", kind: "PTV", prescription_gy: 70.0 },
          { name: "oar_1", kind: "OAR", prescription_gy: null },
          { name: "oar_2", kind: "OAR", prescription_gy: null },
        ],
        beam_angles: [0, 90, 180, 270],
        slider_ranges: { hi: [0.02, 0.2], oar_weight: [0.7, 1.3] },
        grid: { dims: [32, 32, 32], spacing_mm: [4, 4, 4] },
      });
    }
    if (path.endsWith("/predict")) {
      log.predicts.push(body);
      predictCount += 1;
      // nonzero latency so the in-flight busy window is observable under fake timers
      await new Promise((resolve) => setTimeout(resolve, 50));
      const scale = body.oar_weight.oar_1 ?? 1.0;
      return json(200, {
        dvh: {
          ptv_1: fakeCurve(70),
          oar_1: fakeCurve(30 * scale),
          oar_2: fakeCurve(20),
        },
        previous_dvh:
          predictCount > 1
            ? { ptv_1: fakeCurve(70), oar_1: fakeCurve(30), oar_2: fakeCurve(20) }
            : null,
        metrics: {
          ptv_1: { hi: 0.08123456789, ci: 0.987654321, mean_gy: 80.50000190734863, max_gy: 93.2 },
          oar_1: { mean_gy: 30.000001 * scale, max_gy: 47.25 },
          oar_2: { mean_gy: 19.75, max_gy: 44.0 },
        },
        slice: {
          z: 16,
          rows: 2,
          cols: 2,
          values: [
            [0, 10],
            [20, 70],
          ],
          window: [0, 70],
        },
        latency_ms: 42.5,
      });
    }
    if (path.endsWith("/objectives")) {
      return json(200, { objectives: [{ structure: "oar_1" }], text: "# case\noar_1 UpperDV 0.3 1.0 1.0 model-derived" });
    }
    if (path.endsWith("/plan")) {
      const lines = [
        "objectives 11",
        "round 0 penalty 5.0 -> 0.1 (40 steps)",
        "RESULT " +
          JSON.stringify({
            total_penalty: 0.05,
            iterations: 40,
            converged: true,
            per_objective: [],
            achieved_dvh: { ptv_1: fakeCurve(69), oar_1: fakeCurve(28), oar_2: fakeCurve(19) },
            expected_dvh: { ptv_1: fakeCurve(70), oar_1: fakeCurve(30), oar_2: fakeCurve(20) },
            achieved_metrics: { oar_1: { mean_gy: 28.1, max_gy: 45.0 } },
          }),
      ];
      return new Response(lines.join("\n") + "\n", {
        status: 200,
        headers: { "content-type": "text/plain" },
      });
    }
    return json(404, { detail: "unknown path" });
  }) as typeof fetch;
}

function dragSlider(root: HTMLElement, structure: string, value: string, times = 8) {
  const input = root.querySelector<HTMLInputElement>(
    `input[data-structure="${structure}"]`,
  )!;
  for (let i = 0; i < times; i++) {
    input.value = value;
    input.dispatchEvent(new Event("input"));
    vi.advanceTimersByTime(20);   // drag events arrive faster than the debounce
  }
}

describe("interactive panel loop", () => {
  let root: HTMLElement;
  let log: EngineLog;
  let app: App;

  beforeEach(() => {
    vi.useFakeTimers();
    root = document.createElement("div");
    document.body.append(root);
    log = { predicts: [] };
    app = new App({
      client: new EngineClient("http://engine", fakeEngine(log)),
      root,
      storage: window.localStorage,
    });
  });

  afterEach(() => {
    vi.useRealTimers();
    root.remove();
    window.localStorage.clear();
  });

  async function settle() {
    await vi.advanceTimersByTimeAsync(200);
    await vi.runOnlyPendingTimersAsync();
  }

  it("loads a phantom, drags one OAR slider, coalesces to one request per settle", async () => {
    await app.loadCase({ phantom_seed: 7 });
    await settle();
    expect(app.state.sessionId).toBe("s000001");
    expect(log.predicts.length).toBe(1);   // initial predict after load

    dragSlider(root, "oar_1", "0.7");      // 8 rapid input events
    await settle();
    expect(log.predicts.length).toBe(2);   // exactly one coalesced request
    expect(log.predicts[1].oar_weight.oar_1).toBeCloseTo(0.7);
  });

  it("renders current and previous DVH overlays after the second predict", async () => {
    await app.loadCase({ phantom_seed: 7 });
    await settle();
    expect(app.lastOverlay?.previous).toBeNull();

    dragSlider(root, "oar_1", "0.8");
    await settle();
    expect(app.lastOverlay?.previous).not.toBeNull();
    expect(Object.keys(app.lastOverlay!.current)).toEqual(
      expect.arrayContaining(["ptv_1", "oar_1", "oar_2"]),
    );
  });

  it("displays metric numerics byte-equal to the engine response values", async () => {
    await app.loadCase({ phantom_seed: 7 });
    await settle();
    const resp = app.lastPrediction()!;
    for (const [structure, entry] of Object.entries(resp.metrics)) {
      for (const [metric, value] of Object.entries(entry)) {
        const span = root.querySelector(`[data-metric="${structure}.${metric}"]`)!;
        expect(span.textContent).toBe(String(value));
      }
    }
    const status = root.querySelector("#status")!;
    expect(status.textContent).toBe(`forward ${String(resp.latency_ms)} ms`);
  });

  it("keeps sliders disabled while a predict request is in flight", async () => {
    await app.loadCase({ phantom_seed: 7 });
    const input = root.querySelector<HTMLInputElement>("input[type=range]")!;
    input.dispatchEvent(new Event("input"));
    await vi.advanceTimersByTimeAsync(160);   // debounce fired, response pending
    expect(app.state.busy).toBe(true);
    await settle();
    expect(app.state.busy).toBe(false);
    expect(input.disabled).toBe(false);
  });

  it("guards objectives and plan before the first prediction", async () => {
    await app.loadCase({ phantom_seed: 7 });
    // no settle: prediction still pending, state.hasPrediction is false
    await app.extractObjectives();
    await app.runPlan();
    const logText = root.querySelector("#log")!.textContent!;
    expect(logText).toContain("guidance");
    expect(log.predicts.length).toBe(0);
  });

  it("streams plan progress into the log pane and overlays achieved vs expected", async () => {
    await app.loadCase({ phantom_seed: 7 });
    await settle();
    await app.runPlan();
    const logText = root.querySelector("#log")!.textContent!;
    expect(logText).toContain("round 0 penalty");
    expect(logText).toContain("plan finished: penalty=0.05");
    expect(app.lastOverlay?.previous).not.toBeNull();
    expect((app.lastOverlay!.current.ptv_1 as { dose_gy: number[] }).dose_gy[0]).toBe(69);
  });

  it("restores the last session source from local storage", async () => {
    await app.loadCase({ phantom_seed: 9 });
    await settle();
    const fresh = new App({
      client: new EngineClient("http://engine", fakeEngine(log)),
      root,
      storage: window.localStorage,
    });
    const restored = await fresh.restoreLastSession();
    expect(restored).toBe(true);
    expect(fresh.state.caseId).toBe("phantom-9");
  });

  it("shows a toast and re-enables sliders when the engine is offline", async () => {
    const offline = (async () => {
      throw new TypeError("fetch failed");
    }) as unknown as typeof fetch;
    const deadApp = new App({
      client: new EngineClient("http://nowhere", offline),
      root,
    });
    await deadApp.loadCase({ phantom_seed: 7 });
    const toast = root.querySelector<HTMLDivElement>("#toast")!;
    expect(toast.hidden).toBe(false);
    expect(toast.textContent).toContain("fetch failed");
  });
});
