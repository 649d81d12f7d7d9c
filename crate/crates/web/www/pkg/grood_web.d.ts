/* tslint:disable */
/* eslint-disable */

/**
 * Three Gaussian classes on a circle with a fitted detector.
 */
export class Playground {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `[score, p_ood, grad_x, grad_y, nearest training row, predicted class]`
     * for the point `(x, y)`.
     */
    inspect(x: number, y: number): Float64Array;
    constructor(sigma: number, strategy: string, seed: bigint);
    /**
     * Training points as `x, y, label` triples.
     */
    points(): Float64Array;
    /**
     * Class prototypes followed by the OOD prototype, as `x, y` pairs.
     */
    prototypes(): Float64Array;
    /**
     * Scores on a `width x height` grid over `[x0, x1] x [y0, y1]`, row-major
     * from the top edge.
     */
    score_field(x0: number, x1: number, y0: number, y1: number, width: number, height: number): Float64Array;
    /**
     * Threshold at 95 % training TPR.
     */
    tau(): number;
}

/**
 * JSON form of [`bench_report`].
 */
export function synth_bench(classes: number, dim: number, sigma: number, seed: bigint, bins: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_playground_free: (a: number, b: number) => void;
    readonly playground_inspect: (a: number, b: number, c: number) => [number, number];
    readonly playground_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly playground_points: (a: number) => [number, number];
    readonly playground_prototypes: (a: number) => [number, number];
    readonly playground_score_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly playground_tau: (a: number) => number;
    readonly synth_bench: (a: number, b: number, c: number, d: bigint, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
