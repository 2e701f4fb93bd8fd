// Typed client for the composer service. Every compatibility verdict shown in
// the UI comes verbatim from these endpoints; the client never rewrites them.

export interface ModuleDescriptor {
  slot: string;
  option: string;
  name: string;
  canonical: string;
  implemented: boolean;
  tags: string[];
}

export interface AlgorithmInfo {
  name: string;
  category: string;
  implemented: boolean;
  strategies: string[];
}

export interface ModulesResponse {
  slots: string[];
  descriptors: ModuleDescriptor[];
  algorithms: AlgorithmInfo[];
}

export interface Violation {
  rule: string;
  message: string;
  slots: string[];
}

export interface CompatReport {
  ok: boolean;
  violations: Violation[];
}

export interface RunSnapshot {
  id: string;
  status: "queued" | "running" | "done" | "failed";
  losses: number[];
  error: string | null;
}

export interface ConfigDocument {
  slots: Record<string, string>;
  modifiers: string[];
  hyper: Record<string, unknown>;
  seed: number;
  parallel: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    const message = (body as { error?: string }).error ?? resp.statusText;
    throw new ApiError(resp.status, message);
  }
  return body as T;
}

export class ServiceClient {
  constructor(private base: string = "") {}

  async modules(): Promise<ModulesResponse> {
    return asJson(await fetch(`${this.base}/modules`));
  }

  async validate(config: ConfigDocument): Promise<CompatReport> {
    return asJson(await fetch(`${this.base}/validate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(config),
    }));
  }

  async generate(config: ConfigDocument): Promise<string> {
    const body = await asJson<{ script: string }>(await fetch(`${this.base}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(config),
    }));
    return body.script;
  }

  async launch(config: ConfigDocument): Promise<string> {
    const body = await asJson<{ id: string }>(await fetch(`${this.base}/runs`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(config),
    }));
    return body.id;
  }

  async runStatus(id: string): Promise<RunSnapshot> {
    return asJson(await fetch(`${this.base}/runs/${id}`));
  }

  async runReport(id: string): Promise<Record<string, unknown>> {
    return asJson(await fetch(`${this.base}/runs/${id}/report`));
  }
}
