/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const bcp_size_curve_json: (a: number, b: number, c: number, d: number) => [number, number];
export const lplus_explorer_json: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const predictive_curves_json: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
