import { describe, expect, it } from "vitest";

import {
  backoffDelayMs,
  HttpError,
  Outbox,
  SessionClient,
} from "../src/client.js";
import type { PostResult } from "../src/client.js";
import {
  FakeServer,
  instantSleep,
  makeTrials,
  recordingSleep,
} from "./fakes.js";

const BASE = "http://fake";

function client(server: FakeServer, delays?: number[]): SessionClient {
  return new SessionClient(BASE, {
    fetchFn: server.fetchFn,
    sleep: delays === undefined ? instantSleep : recordingSleep(delays),
    retry: { retries: 3, baseDelayMs: 100, maxDelayMs: 1000 },
  });
}

describe("backoffDelayMs", () => {
  it("doubles from the base and saturates at the cap", () => {
    const opts = { retries: 9, baseDelayMs: 100, maxDelayMs: 1000 };
    const delays = [1, 2, 3, 4, 5, 6].map((n) => backoffDelayMs(n, opts));
    expect(delays).toEqual([100, 200, 400, 800, 1000, 1000]);
  });
});

describe("SessionClient GETs", () => {
  it("retries network failures with exponential backoff, then succeeds", async () => {
    const server = new FakeServer("s1", makeTrials(2));
    server.faults.push({
      match: (url) => url.includes("/sessions/s1"),
      mode: "reject",
      remaining: 2,
    });
    const delays: number[] = [];
    const manifest = await client(server, delays).manifest("s1");
    expect(manifest.n_trials).toBe(2);
    expect(delays).toEqual([100, 200]);
  });

  it("gives up after the configured retries", async () => {
    const server = new FakeServer("s1", makeTrials(2));
    server.faults.push({
      match: () => true,
      mode: "reject",
      remaining: Number.POSITIVE_INFINITY,
    });
    await expect(client(server).manifest("s1")).rejects.toThrow(
      "network down",
    );
  });

  it("does not retry a 404 and surfaces it as HttpError", async () => {
    const server = new FakeServer("s1", makeTrials(2));
    let calls = 0;
    const counting: typeof fetch = (input, init) => {
      calls += 1;
      return server.fetchFn(input, init);
    };
    const c = new SessionClient(BASE, { fetchFn: counting, sleep: instantSleep });
    await expect(c.stimulus("missing")).rejects.toThrow(HttpError);
    expect(calls).toBe(1);
  });

  it("fetches stimulus bytes intact", async () => {
    const server = new FakeServer("s1", makeTrials(1));
    const bytes = await client(server).stimulus("t0a");
    expect(bytes).toEqual(server.stimulusBytes.get("t0a"));
  });
});

describe("Outbox", () => {
  function job(
    server: FakeServer,
    payload: Record<string, unknown>,
  ): () => Promise<PostResult> {
    const c = client(server);
    return () =>
      c.postResponse("s1", {
        index: 0,
        response: "A",
        response_time_ms: 300,
        timestamp: "t",
        stimulus_a: "t0a",
        stimulus_b: "t0b",
        stimulus_x: "t0x",
        ...payload,
      });
  }

  it("delivers strictly in order even when the head keeps failing", async () => {
    const server = new FakeServer("s1", makeTrials(3));
    server.faults.push({
      match: (_url, init) =>
        init?.method === "POST" && String(init.body).includes('"index":0'),
      mode: "reject",
      remaining: 3,
    });
    const outbox = new Outbox({ sleep: instantSleep });
    const c = client(server);
    const results = await Promise.all(
      [0, 1, 2].map((index) =>
        outbox.enqueue(() =>
          c.postResponse("s1", {
            index,
            response: "A",
            response_time_ms: 300,
            timestamp: "t",
            stimulus_a: `t${index}a`,
            stimulus_b: `t${index}b`,
            stimulus_x: `t${index}x`,
          }),
        ),
      ),
    );
    // the first post was retried until the server took it; the others
    // waited behind it, so arrival order matches enqueue order
    const seen = server.posts.map((p) => p.body.index);
    expect(seen).toEqual([0, 1, 2]);
    expect(results.map((r) => r.status)).toEqual([200, 200, 200]);
    expect(server.log.length).toBe(3);
  });

  it("a keypress survives a lost acknowledgment as a duplicate ack", async () => {
    const server = new FakeServer("s1", makeTrials(1));
    server.faults.push({
      match: (_url, init) => init?.method === "POST",
      mode: "drop-ack",
      remaining: 1,
    });
    const outbox = new Outbox({ sleep: instantSleep });
    const result = await outbox.enqueue(job(server, {}));
    expect(result.status).toBe(200);
    expect(result.body.duplicate).toBe(true);
    // exactly one record despite two arrivals at the server
    expect(server.log.length).toBe(1);
    expect(server.posts.length).toBe(2);
  });

  it("applies exponential backoff between retries", async () => {
    const server = new FakeServer("s1", makeTrials(1));
    server.faults.push({
      match: (_url, init) => init?.method === "POST",
      mode: "reject",
      remaining: 4,
    });
    const delays: number[] = [];
    const outbox = new Outbox({
      sleep: recordingSleep(delays),
      baseDelayMs: 50,
      maxDelayMs: 200,
    });
    const result = await outbox.enqueue(job(server, {}));
    expect(result.status).toBe(200);
    expect(delays).toEqual([50, 100, 200, 200]);
  });

  it("hands protocol rejections back without retrying them", async () => {
    const server = new FakeServer("s1", makeTrials(2));
    const outbox = new Outbox({ sleep: instantSleep });
    const result = await outbox.enqueue(
      job(server, {
        index: 1,
        stimulus_a: "t1a",
        stimulus_b: "t1b",
        stimulus_x: "t1x",
      }),
    );
    expect(result.status).toBe(409);
    expect(result.body.error).toBe("out-of-order");
    expect(server.posts.length).toBe(1);
  });
});
