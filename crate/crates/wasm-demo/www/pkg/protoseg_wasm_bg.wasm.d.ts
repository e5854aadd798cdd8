/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_trainingsession_free: (a: number, b: number) => void;
export const miTerms: (a: number, b: number, c: number) => [number, number, number, number];
export const orthValue: (a: number, b: number, c: number) => [number, number, number];
export const renderSample: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const trainingsession_imageSize: (a: number) => number;
export const trainingsession_legend: (a: number) => [number, number];
export const trainingsession_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const trainingsession_numVal: (a: number) => number;
export const trainingsession_panels: (a: number, b: number) => [number, number, number, number];
export const trainingsession_step: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
