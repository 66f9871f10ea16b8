/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_impactdemo_free: (a: number, b: number) => void;
export const impactdemo_contact_edges: (a: number, b: number, c: number) => [number, number, number, number];
export const impactdemo_deformable: (a: number) => [number, number];
export const impactdemo_hardening: (a: number, b: number) => [number, number, number, number];
export const impactdemo_mesh_edges: (a: number) => [number, number];
export const impactdemo_n_frames: (a: number) => number;
export const impactdemo_n_nodes: (a: number) => number;
export const impactdemo_n_tokens: (a: number) => number;
export const impactdemo_new: (a: number, b: number) => [number, number, number];
export const impactdemo_positions: (a: number, b: number) => [number, number, number, number];
export const impactdemo_slice_weights: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
