/**
 * Response collection with a buffered input window. The collector arms
 * at trial start; a configured key pressed during the stimulus
 * sequence is buffered (the latest press wins, earlier ones are the
 * observer changing their mind) and applied the instant the prompt
 * opens. Once one response is accepted the window closes, so a trial
 * can never produce two responses.
 */

import type { InputSource } from "./types.js";

export interface KeyPress {
  key: string;
  timeMs: number;
}

export class ResponseCollector {
  private buffered: KeyPress | null = null;
  private waiter: ((press: KeyPress) => void) | null = null;
  private armed = false;
  private readonly detach: () => void;

  constructor(
    input: InputSource,
    private readonly keys: [string, string],
  ) {
    this.detach = input.onKey((key, timeMs) => this.handle(key, timeMs));
  }

  /** Open the input window for a new trial. */
  arm(): void {
    this.buffered = null;
    this.armed = true;
  }

  private handle(key: string, timeMs: number): void {
    if (!this.armed || !this.keys.includes(key)) {
      return;
    }
    if (this.waiter !== null) {
      const waiter = this.waiter;
      this.waiter = null;
      this.armed = false;
      waiter({ key, timeMs });
    } else {
      this.buffered = { key, timeMs };
    }
  }

  /** Called when the prompt opens: resolves immediately with a buffered
   * press, otherwise with the first configured key pressed from now on. */
  awaitResponse(): Promise<KeyPress> {
    if (this.buffered !== null) {
      const press = this.buffered;
      this.buffered = null;
      this.armed = false;
      return Promise.resolve(press);
    }
    return new Promise((resolve) => {
      this.waiter = resolve;
    });
  }

  dispose(): void {
    this.detach();
  }
}
