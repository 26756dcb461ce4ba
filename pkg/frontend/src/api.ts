import { Progress, SampleDescriptor, ScoreDraft } from './types.js';

let base = '';

/** Point the client at a server root (used by tests; empty = same origin). */
export function setApiBase(url: string): void {
  base = url.replace(/\/+$/, '');
}

export function apiUrl(path: string): string {
  return base + path;
}

export type PostOutcome =
  | { status: 'created' }
  | { status: 'invalid'; errors: Record<string, string> }
  | { status: 'unknown-id' }
  | { status: 'network'; message: string };

export async function fetchQueue(n: number): Promise<SampleDescriptor[]> {
  const resp = await fetch(apiUrl(`/api/queue?n=${n}`));
  if (!resp.ok) throw new Error(`queue failed: ${resp.status}`);
  return (await resp.json()) as SampleDescriptor[];
}

export async function fetchProgress(): Promise<Progress> {
  const resp = await fetch(apiUrl('/api/progress'));
  if (!resp.ok) throw new Error(`progress failed: ${resp.status}`);
  return (await resp.json()) as Progress;
}

export async function postScore(id: string, draft: ScoreDraft): Promise<PostOutcome> {
  let resp: Response;
  try {
    resp = await fetch(apiUrl('/api/score'), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({
        id,
        color: draft.color,
        visibility: draft.visibility,
        translucency: draft.translucency,
      }),
    });
  } catch (err) {
    return { status: 'network', message: String(err) };
  }
  if (resp.status === 201) return { status: 'created' };
  if (resp.status === 404) return { status: 'unknown-id' };
  if (resp.status === 422) {
    const errors: Record<string, string> = {};
    try {
      const body = await resp.json();
      for (const item of body.detail ?? []) {
        const field = Array.isArray(item.loc) ? String(item.loc[item.loc.length - 1]) : 'draft';
        errors[field] = String(item.msg ?? 'invalid');
      }
    } catch {
      errors['draft'] = 'rejected by the server';
    }
    return { status: 'invalid', errors };
  }
  return { status: 'network', message: `unexpected status ${resp.status}` };
}
