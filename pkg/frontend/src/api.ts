// Typed client for the adaptive-testing session service.
// Every number the UI shows comes from these payloads verbatim.

export interface RecommendedItem {
    index: number;
    difficulty: number;
    band: string;
}

export interface HistoryRow {
    step: number;
    item_index: number;
    difficulty: number;
    outcome: number;
    estimate: number;
}

export interface SessionSnapshot {
    id: string;
    status: "active" | "completed";
    horizon: number;
    response_count: number;
    recommended_item: RecommendedItem | null;
    trajectory: number[];
    history: HistoryRow[];
    created_at: number;
    updated_at: number;
}

export interface ServiceError {
    code: string;
    message: string;
}

export class ApiError extends Error {
    constructor(
        public readonly status: number,
        public readonly code: string,
        message: string,
    ) {
        super(message);
        this.name = "ApiError";
    }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function parseOrThrow(resp: Response): Promise<SessionSnapshot> {
    if (resp.ok) {
        return (await resp.json()) as SessionSnapshot;
    }
    let code = "unknown";
    let message = `service responded ${resp.status}`;
    try {
        const body = (await resp.json()) as ServiceError;
        code = body.code ?? code;
        message = body.message ?? message;
    } catch {
        // non-JSON error body; keep the generic message
    }
    throw new ApiError(resp.status, code, message);
}

export class SessionClient {
    constructor(
        private readonly baseUrl: string,
        private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
    ) {}

    private url(path: string): string {
        return this.baseUrl.replace(/\/$/, "") + path;
    }

    async createSession(): Promise<SessionSnapshot> {
        const resp = await this.fetchFn(this.url("/sessions"), { method: "POST" });
        return parseOrThrow(resp);
    }

    async getSession(id: string): Promise<SessionSnapshot> {
        const resp = await this.fetchFn(this.url(`/sessions/${id}`), { method: "GET" });
        return parseOrThrow(resp);
    }

    // `step` is the optimistic-concurrency token: the response count this
    // submission believes it is answering. The service rejects stale ones.
    async submitResponse(id: string, outcome: 0 | 1, step: number): Promise<SessionSnapshot> {
        const resp = await this.fetchFn(this.url(`/sessions/${id}/responses`), {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify({ outcome, step }),
        });
        return parseOrThrow(resp);
    }
}
