import { Palette } from "./palette.js";

export interface SessionArtifacts {
  id: string;
  coarse: string; // base64 PNG
  semantic_mask: string; // base64 PNG
  palette: Palette;
}

export interface RefineResult {
  id: string;
  result: string; // base64 PNG
}

export interface HistoryEntry {
  index: number;
  submitted_at: number;
  mask: string;
  result: string;
}

export interface SessionState {
  id: string;
  created: number;
  size: number;
  original_size: [number, number];
  input: string;
  mask: string;
  coarse: string;
  semantic_mask: string;
  history: HistoryEntry[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly detail: unknown,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(`${this.base}${path}`, init);
    const body = await res.json().catch(() => null);
    if (!res.ok) {
      const code = body?.code ?? "http_error";
      const message = body?.message ?? `request failed with status ${res.status}`;
      throw new ApiError(res.status, code, message, body?.detail ?? null);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  createSession(imagePngB64: string, maskPngB64: string): Promise<SessionArtifacts> {
    return this.post("/sessions", { image: imagePngB64, mask: maskPngB64 });
  }

  refine(sessionId: string, maskPngB64: string): Promise<RefineResult> {
    return this.post(`/sessions/${sessionId}/refine`, { mask: maskPngB64 });
  }

  getSession(sessionId: string): Promise<SessionState> {
    return this.request(`/sessions/${sessionId}`);
  }

  async getPalette(): Promise<Palette> {
    const body = await this.request<{ palette: Palette }>("/palette");
    return body.palette;
  }

  async health(): Promise<boolean> {
    try {
      await this.request("/healthz");
      return true;
    } catch {
      return false;
    }
  }
}
