import type { ModelInfo, ServiceClient } from "./types.js";

export interface SliderModel {
  label: string;
  scale: number;
  value: number;
}

export type Phase = "boot" | "ready" | "error";

export interface UiState {
  phase: Phase;
  error?: string;
  notice?: string;
  sliders: SliderModel[];
  params: number[];
  sourceImage?: string;
  displayedImage?: string;
  targetImage?: string;
  targetParams?: number[];
  interpolation: number;
  scrubActive: boolean;
  transferEnabled: boolean;
  transferError?: string;
  busy: boolean;
  lastResponseMs?: number;
}

export interface ConsoleOptions {
  debounceMs?: number;
  now?: () => number;
}

const clamp = (v: number, lo: number, hi: number) => Math.min(hi, Math.max(lo, v));

/**
 * Framework-free slider console core.
 *
 * Slider edits are debounced (150 ms default) into /edit requests that
 * always carry the full clamped parameter vector.  Each request gets a
 * monotonically increasing id; a response older than the newest accepted
 * one is discarded, so the displayed image never moves backwards.  A
 * newer request supersedes an in-flight one (the stale response is
 * simply ignored).  No request is ever sent while the slider count does
 * not match the model's parameter count.
 */
export class SliderConsole {
  readonly state: UiState = {
    phase: "boot",
    sliders: [],
    params: [],
    interpolation: 1.0,
    scrubActive: false,
    transferEnabled: false,
    busy: false,
  };

  private info?: ModelInfo;
  private listeners: Array<(s: UiState) => void> = [];
  private debounceMs: number;
  private now: () => number;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private requestSeq = 0;
  private acceptedId = 0;

  constructor(private readonly client: ServiceClient, opts: ConsoleOptions = {}) {
    this.debounceMs = opts.debounceMs ?? 150;
    this.now = opts.now ?? (() => Date.now());
  }

  subscribe(fn: (s: UiState) => void): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((f) => f !== fn);
    };
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.state);
  }

  async init(defaultSourceImage?: string): Promise<void> {
    this.state.phase = "boot";
    this.state.error = undefined;
    this.emit();
    try {
      this.info = await this.client.modelInfo();
    } catch (err) {
      this.state.phase = "error";
      this.state.sliders = [];
      this.state.error = `service unreachable: ${String(err)}`;
      this.emit();
      return;
    }
    const n = this.info.n_params;
    this.state.sliders = Array.from({ length: n }, (_, k) => ({
      label: this.info!.labels[k] ?? `param_${k}`,
      scale: this.info!.scales[k] ?? 1,
      value: 0,
    }));
    this.state.params = new Array(n).fill(0);
    this.state.phase = "ready";
    if (defaultSourceImage !== undefined) {
      this.state.sourceImage = defaultSourceImage;
      this.sendNow(this.state.params.slice());
    }
    this.emit();
  }

  get modelInfo(): ModelInfo | undefined {
    return this.info;
  }

  setSource(imageB64: string): void {
    this.state.sourceImage = imageB64;
    this.state.scrubActive = false;
    this.sendNow(this.activeVector());
  }

  onSliderChange(k: number, value: number): void {
    if (this.state.phase !== "ready" || k < 0 || k >= this.state.params.length) return;
    const v = clamp(value, -1, 1);
    this.state.params[k] = v;
    this.state.sliders[k].value = v;
    this.state.scrubActive = false;
    this.schedule();
  }

  reset(): void {
    if (this.state.phase !== "ready") return;
    this.state.params.fill(0);
    for (const s of this.state.sliders) s.value = 0;
    this.state.scrubActive = false;
    this.schedule();
  }

  async setTarget(imageB64: string): Promise<void> {
    this.state.targetImage = imageB64;
    try {
      const resp = await this.client.regress(imageB64);
      this.state.targetParams = resp.params.map((v) => clamp(v, -1, 1));
      this.state.transferEnabled = true;
      this.state.transferError = undefined;
    } catch (err) {
      this.state.targetParams = undefined;
      this.state.transferEnabled = false;
      this.state.transferError = `target regression failed: ${String(err)}`;
    }
    this.emit();
  }

  /** a = 1 shows the source's expression, a = 0 the full target's. */
  scrub(a: number): void {
    if (!this.state.transferEnabled || this.state.targetParams === undefined) return;
    this.state.interpolation = clamp(a, 0, 1);
    this.state.scrubActive = true;
    this.schedule();
  }

  activeVector(): number[] {
    if (this.state.scrubActive && this.state.targetParams !== undefined) {
      const a = this.state.interpolation;
      return this.state.params.map(
        (src, i) => a * src + (1 - a) * this.state.targetParams![i]
      );
    }
    return this.state.params.slice();
  }

  private schedule(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.sendNow(this.activeVector());
    }, this.debounceMs);
    this.emit();
  }

  private sendNow(vector: number[]): void {
    if (this.state.phase !== "ready" || this.state.sourceImage === undefined) return;
    if (this.info === undefined || vector.length !== this.info.n_params) return;
    const clamped = vector.map((v) => clamp(v, -1, 1));
    const id = ++this.requestSeq;
    const started = this.now();
    this.state.busy = true;
    this.emit();
    this.client
      .edit(this.state.sourceImage, clamped)
      .then((resp) => {
        if (id < this.acceptedId) return; // stale: a newer response already displayed
        this.acceptedId = id;
        this.state.displayedImage = resp.image_b64;
        this.state.lastResponseMs = this.now() - started;
        this.state.notice = undefined;
      })
      .catch((err) => {
        if (id < this.acceptedId) return;
        this.state.notice = `edit failed: ${String(err)}`; // keep previous image
      })
      .finally(() => {
        if (id === this.requestSeq) this.state.busy = false;
        this.emit();
      });
  }
}
