import { EMPTY_DRAFT, MetricName, SampleDescriptor, ScoreDraft } from './types.js';

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

const DRAFT_KEY = 'smokegen-annotation-drafts';

/** Queue walk with per-sample drafts that survive a page reload.
 *
 * Acknowledged submissions leave the session for good: their ids are
 * remembered, their drafts dropped, and navigation skips them.
 */
export class AnnotationSession {
  queue: SampleDescriptor[] = [];
  cursor = 0;
  submitted = new Set<string>();
  skipped = new Map<string, string>();
  private drafts = new Map<string, ScoreDraft>();

  constructor(private storage: StorageLike | null = null, private key = DRAFT_KEY) {
    this.restoreDrafts();
  }

  load(queue: SampleDescriptor[]): void {
    this.queue = queue.filter((d) => !this.submitted.has(d.id));
    this.cursor = 0;
  }

  get current(): SampleDescriptor | null {
    return this.queue[this.cursor] ?? null;
  }

  get done(): boolean {
    return this.queue.every((d) => this.submitted.has(d.id) || this.skipped.has(d.id));
  }

  draftFor(id: string): ScoreDraft {
    return this.drafts.get(id) ?? { ...EMPTY_DRAFT };
  }

  setScore(id: string, metric: MetricName, value: number | null): ScoreDraft {
    const draft = { ...this.draftFor(id), [metric]: value };
    this.drafts.set(id, draft);
    this.persistDrafts();
    return draft;
  }

  markSubmitted(id: string): void {
    this.submitted.add(id);
    this.drafts.delete(id);
    this.persistDrafts();
  }

  markSkipped(id: string, note: string): void {
    this.skipped.set(id, note);
  }

  advance(): void {
    this.moveFrom(this.cursor, +1);
  }

  back(): void {
    this.moveFrom(this.cursor, -1);
  }

  /** Step in a direction, landing on the nearest non-submitted sample. */
  private moveFrom(start: number, step: number): void {
    let i = start + step;
    while (i >= 0 && i < this.queue.length && this.submitted.has(this.queue[i].id)) {
      i += step;
    }
    if (i >= 0 && i < this.queue.length) {
      this.cursor = i;
    }
  }

  private persistDrafts(): void {
    if (!this.storage) return;
    const obj: Record<string, ScoreDraft> = {};
    for (const [id, draft] of this.drafts) obj[id] = draft;
    this.storage.setItem(this.key, JSON.stringify(obj));
  }

  private restoreDrafts(): void {
    if (!this.storage) return;
    const raw = this.storage.getItem(this.key);
    if (!raw) return;
    try {
      const obj = JSON.parse(raw) as Record<string, ScoreDraft>;
      for (const [id, draft] of Object.entries(obj)) this.drafts.set(id, draft);
    } catch {
      this.storage.removeItem(this.key);
    }
  }
}
