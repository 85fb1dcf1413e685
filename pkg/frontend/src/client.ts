/**
 * HTTP client for the session server plus an ordered outbox for posts.
 *
 * GETs retry transient failures (network errors, 5xx) with exponential
 * backoff and give up after a bounded number of attempts. Posts go
 * through the Outbox, which delivers strictly in order and retries the
 * head of the queue forever: a recorded keypress is never dropped and
 * never overtaken by a later one. Rejections the server expresses as
 * HTTP status codes (400, 409, duplicate acks) are outcomes, not
 * failures, and are returned to the caller without retrying.
 */

import type {
  ErrorBody,
  NextTrial,
  PostAck,
  ResponsePayload,
  SessionManifest,
  SkipPayload,
} from "./types.js";

export interface RetryOptions {
  /** Additional attempts after the first (GETs only). */
  retries: number;
  baseDelayMs: number;
  maxDelayMs: number;
}

const DEFAULT_RETRY: RetryOptions = {
  retries: 4,
  baseDelayMs: 100,
  maxDelayMs: 2_000,
};

export type Sleeper = (ms: number) => Promise<void>;

const realSleep: Sleeper = (ms) => new Promise((r) => setTimeout(r, ms));

/** Delay before retry attempt n (n = 1 for the first retry). */
export function backoffDelayMs(attempt: number, opts: RetryOptions): number {
  return Math.min(opts.maxDelayMs, opts.baseDelayMs * 2 ** (attempt - 1));
}

/** A non-2xx response outside the outbox path (unknown session, missing
 * stimulus, malformed URL). */
export class HttpError extends Error {
  constructor(
    readonly status: number,
    readonly body: unknown,
    url: string,
  ) {
    super(`HTTP ${status} for ${url}`);
    this.name = "HttpError";
  }
}

export interface ClientOptions {
  fetchFn?: typeof fetch;
  sleep?: Sleeper;
  retry?: Partial<RetryOptions>;
}

/** Status + parsed body of a post; 4xx/409 land here, not in a throw. */
export interface PostResult {
  status: number;
  body: PostAck & ErrorBody;
}

export class SessionClient {
  private readonly fetchFn: typeof fetch;
  private readonly sleep: Sleeper;
  private readonly retry: RetryOptions;

  constructor(
    readonly baseUrl: string,
    opts: ClientOptions = {},
  ) {
    this.fetchFn = opts.fetchFn ?? fetch;
    this.sleep = opts.sleep ?? realSleep;
    this.retry = { ...DEFAULT_RETRY, ...opts.retry };
  }

  manifest(sessionId: string): Promise<SessionManifest> {
    return this.getJson(`/sessions/${sessionId}`);
  }

  nextTrial(sessionId: string): Promise<NextTrial> {
    return this.getJson(`/sessions/${sessionId}/trials/next`);
  }

  async stimulus(id: string): Promise<Uint8Array> {
    const resp = await this.getWithRetries(`/stimuli/${id}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  postResponse(sessionId: string, payload: ResponsePayload): Promise<PostResult> {
    return this.post(`/sessions/${sessionId}/responses`, payload);
  }

  postSkip(sessionId: string, payload: SkipPayload): Promise<PostResult> {
    return this.post(`/sessions/${sessionId}/skips`, payload);
  }

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.getWithRetries(path);
    return (await resp.json()) as T;
  }

  /** GET with backoff on network errors and 5xx; 4xx throws HttpError. */
  private async getWithRetries(path: string): Promise<Response> {
    const url = this.baseUrl + path;
    for (let attempt = 0; ; attempt++) {
      try {
        const resp = await this.fetchFn(url);
        if (resp.ok) {
          return resp;
        }
        if (resp.status >= 500 && attempt < this.retry.retries) {
          await this.sleep(backoffDelayMs(attempt + 1, this.retry));
          continue;
        }
        throw new HttpError(resp.status, await safeBody(resp), url);
      } catch (err) {
        if (err instanceof HttpError || attempt >= this.retry.retries) {
          throw err;
        }
        await this.sleep(backoffDelayMs(attempt + 1, this.retry));
      }
    }
  }

  /** Single-attempt post: the Outbox owns retry for submissions. */
  private async post(path: string, payload: unknown): Promise<PostResult> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    return {
      status: resp.status,
      body: (await resp.json()) as PostAck & ErrorBody,
    };
  }
}

async function safeBody(resp: Response): Promise<unknown> {
  try {
    return await resp.json();
  } catch {
    return null;
  }
}

interface OutboxJob {
  send: () => Promise<PostResult>;
  resolve: (r: PostResult) => void;
  reject: (err: unknown) => void;
}

export interface OutboxOptions {
  sleep?: Sleeper;
  baseDelayMs?: number;
  maxDelayMs?: number;
  /** Observability hook for tests and UI status lines. */
  onRetry?: (attempt: number, err: unknown) => void;
}

/** Strictly ordered delivery queue for response and skip posts.
 *
 * The head job is retried with exponential backoff until the server
 * produces any HTTP response; only then does the next job start. A
 * duplicate ack after a lost acknowledgment therefore reaches the
 * caller as an ordinary result, and no submission can jump the queue.
 */
export class Outbox {
  private readonly queue: OutboxJob[] = [];
  private readonly sleep: Sleeper;
  private readonly retry: RetryOptions;
  private readonly onRetry?: (attempt: number, err: unknown) => void;
  private pumping = false;

  constructor(opts: OutboxOptions = {}) {
    this.sleep = opts.sleep ?? realSleep;
    this.retry = {
      retries: Number.POSITIVE_INFINITY,
      baseDelayMs: opts.baseDelayMs ?? 100,
      maxDelayMs: opts.maxDelayMs ?? 2_000,
    };
    this.onRetry = opts.onRetry;
  }

  get pending(): number {
    return this.queue.length;
  }

  enqueue(send: () => Promise<PostResult>): Promise<PostResult> {
    return new Promise<PostResult>((resolve, reject) => {
      this.queue.push({ send, resolve, reject });
      void this.pump();
    });
  }

  private async pump(): Promise<void> {
    if (this.pumping) {
      return;
    }
    this.pumping = true;
    try {
      while (this.queue.length > 0) {
        const job = this.queue[0];
        for (let attempt = 1; ; attempt++) {
          try {
            job.resolve(await job.send());
            break;
          } catch (err) {
            this.onRetry?.(attempt, err);
            await this.sleep(backoffDelayMs(attempt, this.retry));
          }
        }
        this.queue.shift();
      }
    } finally {
      this.pumping = false;
    }
  }
}
