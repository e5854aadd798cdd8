/* tslint:disable */
/* eslint-disable */

export class TrainingSession {
    free(): void;
    [Symbol.dispose](): void;
    imageSize(): number;
    legend(): Uint8Array;
    constructor(method: string, prototypes_per_class: number, seed: number, epochs: number);
    numVal(): number;
    panels(index: number): Uint8Array;
    /**
     * Empty once the run is finished.
     */
    step(): Float64Array;
}

export function miTerms(prototypes: number, balance: number, sharpness: number): Float64Array;

export function orthValue(angle_deg: number, norm_a: number, norm_b: number): number;

/**
 * `[image RGBA, mask RGBA]` of sample `index`, concatenated.
 */
export function renderSample(index: number, data_seed: number, image_size: number, modes_per_class: number, num_classes: number, noise_sigma: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_trainingsession_free: (a: number, b: number) => void;
    readonly miTerms: (a: number, b: number, c: number) => [number, number, number, number];
    readonly orthValue: (a: number, b: number, c: number) => [number, number, number];
    readonly renderSample: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly trainingsession_imageSize: (a: number) => number;
    readonly trainingsession_legend: (a: number) => [number, number];
    readonly trainingsession_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly trainingsession_numVal: (a: number) => number;
    readonly trainingsession_panels: (a: number, b: number) => [number, number, number, number];
    readonly trainingsession_step: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
