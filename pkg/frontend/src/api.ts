/** Typed client for the dose proposal engine. */

export interface StructureInfo {
  name: string;
  kind: "PTV" | "OAR";
  prescription_gy: number | null;
}

export interface SessionInfo {
  session_id: string;
  case_id: string;
  structures: StructureInfo[];
  beam_angles: number[];
  slider_ranges: { hi: [number, number]; oar_weight: [number, number] };
  grid: { dims: number[]; spacing_mm: number[] };
}

export interface DvhCurve {
  volume_fraction: number[];
  dose_gy: number[];
}

export interface PredictResponse {
  dvh: Record<string, DvhCurve>;
  previous_dvh: Record<string, DvhCurve> | null;
  metrics: Record<string, Record<string, number>>;
  slice: { z: number; rows: number; cols: number; values: number[][]; window: [number, number] };
  latency_ms: number;
}

export interface PlanResult {
  total_penalty: number;
  iterations: number;
  converged: boolean;
  per_objective: Array<Record<string, unknown>>;
  achieved_dvh: Record<string, DvhCurve>;
  expected_dvh: Record<string, DvhCurve>;
  achieved_metrics: Record<string, Record<string, number>>;
}

export class EngineError extends Error {
  constructor(public status: number, detail: string) {
    super(`engine ${status}: ${detail}`);
  }
}

async function jsonOrThrow<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new EngineError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class EngineClient {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  async health(): Promise<{ status: string }> {
    return jsonOrThrow(await this.fetchFn(`${this.baseUrl}/healthz`));
  }

  async createSession(source: { bundle_path?: string; phantom_seed?: number }): Promise<SessionInfo> {
    const resp = await this.fetchFn(`${this.baseUrl}/cases`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(source),
    });
    return jsonOrThrow(resp);
  }

  async predict(
    sessionId: string,
    hiTarget: Record<string, number>,
    oarWeight: Record<string, number>,
  ): Promise<PredictResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/cases/${sessionId}/predict`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ hi_target: hiTarget, oar_weight: oarWeight }),
    });
    return jsonOrThrow(resp);
  }

  async extractObjectives(sessionId: string): Promise<{ objectives: unknown[]; text: string }> {
    const resp = await this.fetchFn(`${this.baseUrl}/cases/${sessionId}/objectives`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({}),
    });
    return jsonOrThrow(resp);
  }

  /** Streams plan progress lines to onLine; resolves with the final report. */
  async runPlan(
    sessionId: string,
    onLine: (line: string) => void,
    maxIterations = 300,
  ): Promise<PlanResult> {
    const resp = await this.fetchFn(`${this.baseUrl}/cases/${sessionId}/plan`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ max_iterations: maxIterations }),
    });
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        /* keep statusText */
      }
      throw new EngineError(resp.status, detail);
    }
    const text = await resp.text();
    let result: PlanResult | null = null;
    for (const line of text.split("\n")) {
      if (!line) continue;
      if (line.startsWith("RESULT ")) {
        result = JSON.parse(line.slice("RESULT ".length)) as PlanResult;
      } else {
        onLine(line);
      }
    }
    if (!result) throw new EngineError(502, "plan stream ended without a result line");
    return result;
  }
}
