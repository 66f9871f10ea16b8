/* tslint:disable */
/* eslint-disable */

/**
 * One impact trajectory for the page.
 */
export class ImpactDemo {
    free(): void;
    [Symbol.dispose](): void;
    contact_edges(t: number, radius: number): Uint32Array;
    /**
     * 1 for lattice nodes, 0 for wall nodes.
     */
    deformable(): Uint8Array;
    hardening(t: number): Float64Array;
    mesh_edges(): Uint32Array;
    n_frames(): number;
    n_nodes(): number;
    n_tokens(): number;
    constructor(kappa: number, frames: number);
    positions(t: number): Float64Array;
    /**
     * `gumbel_seed < 0` disables the noise.
     */
    slice_weights(t: number, tau0: number, gumbel_seed: number): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_impactdemo_free: (a: number, b: number) => void;
    readonly impactdemo_contact_edges: (a: number, b: number, c: number) => [number, number, number, number];
    readonly impactdemo_deformable: (a: number) => [number, number];
    readonly impactdemo_hardening: (a: number, b: number) => [number, number, number, number];
    readonly impactdemo_mesh_edges: (a: number) => [number, number];
    readonly impactdemo_n_frames: (a: number) => number;
    readonly impactdemo_n_nodes: (a: number) => number;
    readonly impactdemo_n_tokens: (a: number) => number;
    readonly impactdemo_new: (a: number, b: number) => [number, number, number];
    readonly impactdemo_positions: (a: number, b: number) => [number, number, number, number];
    readonly impactdemo_slice_weights: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
