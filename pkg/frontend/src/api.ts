/** Types and helpers for the render service's HTTP interface. */

export type Vec3 = [number, number, number];

export interface RenderParams {
  position: Vec3;
  target: Vec3;
  up?: Vec3;
  fovY?: number;
  width: number;
  height: number;
  groupMask: number;
  background?: Vec3;
  tf?: string;
}

export interface GroupInfo {
  index: number;
  name: string;
}

export interface BoundingBox {
  min: Vec3;
  max: Vec3;
}

export interface VariantMeta {
  count: number;
  group_counts: number[];
  bounding_box: BoundingBox | null;
}

export interface SceneMeta {
  tf_presets: string[];
  count: number;
  group_counts: number[];
  bounding_box: BoundingBox | null;
  variants: Record<string, VariantMeta>;
}

const vec = (v: Vec3): string => v.join(",");

/** Query string for /render; keys match the service's parameter names. */
export function buildRenderQuery(p: RenderParams): string {
  const q = new URLSearchParams();
  q.set("position", vec(p.position));
  q.set("target", vec(p.target));
  if (p.up !== undefined) q.set("up", vec(p.up));
  if (p.fovY !== undefined) q.set("fov_y", String(p.fovY));
  q.set("width", String(p.width));
  q.set("height", String(p.height));
  q.set("group_mask", String(p.groupMask));
  if (p.background !== undefined) q.set("background", vec(p.background));
  if (p.tf !== undefined) q.set("tf", p.tf);
  return q.toString();
}

async function fetchJson<T>(path: string): Promise<T> {
  const res = await fetch(path);
  if (!res.ok) throw new Error(`${path}: HTTP ${res.status}`);
  return (await res.json()) as T;
}

export const fetchMeta = (): Promise<SceneMeta> => fetchJson<SceneMeta>("/meta");

export async function fetchGroups(): Promise<GroupInfo[]> {
  return (await fetchJson<{ groups: GroupInfo[] }>("/groups")).groups;
}

/** One frame as a PNG blob; server error bodies become the Error message. */
export async function fetchFrame(query: string): Promise<Blob> {
  const res = await fetch(`/render?${query}`);
  if (!res.ok) {
    const text = await res.text().catch(() => "");
    throw new Error(text.trim() || `render failed: HTTP ${res.status}`);
  }
  return res.blob();
}
