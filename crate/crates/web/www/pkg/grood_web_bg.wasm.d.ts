/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_playground_free: (a: number, b: number) => void;
export const playground_inspect: (a: number, b: number, c: number) => [number, number];
export const playground_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const playground_points: (a: number) => [number, number];
export const playground_prototypes: (a: number) => [number, number];
export const playground_score_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const playground_tau: (a: number) => number;
export const synth_bench: (a: number, b: number, c: number, d: bigint, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
