import { beforeEach, describe, expect, it } from 'vitest';

import { AnnotationSession, StorageLike } from '../src/session.js';
import { SampleDescriptor } from '../src/types.js';

class FakeStorage implements StorageLike {
  private map = new Map<string, string>();
  getItem(key: string) {
    return this.map.get(key) ?? null;
  }
  setItem(key: string, value: string) {
    this.map.set(key, value);
  }
  removeItem(key: string) {
    this.map.delete(key);
  }
}

function queue(n: number): SampleDescriptor[] {
  return Array.from({ length: n }, (_, i) => ({
    id: `g${i}`,
    image_url: `/images/g${i}`,
    mask_url: i % 2 === 0 ? `/masks/g${i}` : null,
  }));
}

describe('AnnotationSession', () => {
  let storage: FakeStorage;
  let session: AnnotationSession;

  beforeEach(() => {
    storage = new FakeStorage();
    session = new AnnotationSession(storage);
    session.load(queue(4));
  });

  it('starts at the first sample', () => {
    expect(session.current?.id).toBe('g0');
  });

  it('cursor stays within bounds', () => {
    session.back();
    expect(session.current?.id).toBe('g0');
    for (let i = 0; i < 10; i++) session.advance();
    expect(session.current?.id).toBe('g3');
  });

  it('drafts persist across a reload', () => {
    session.setScore('g0', 'color', 7);
    session.setScore('g0', 'visibility', 6);
    const reloaded = new AnnotationSession(storage);
    reloaded.load(queue(4));
    expect(reloaded.draftFor('g0')).toEqual({ color: 7, visibility: 6, translucency: null });
  });

  it('submission drops the draft and skips the sample in navigation', () => {
    session.setScore('g1', 'color', 4);
    session.markSubmitted('g1');
    expect(session.draftFor('g1')).toEqual({ color: null, visibility: null, translucency: null });
    session.cursor = 0;
    session.advance();
    expect(session.current?.id).toBe('g2');
    const reloaded = new AnnotationSession(storage);
    reloaded.load(queue(4));
    expect(reloaded.draftFor('g1').color).toBeNull();
  });

  it('submitted samples never rejoin a reloaded queue', () => {
    session.markSubmitted('g0');
    session.load(queue(4));
    expect(session.queue.map((d) => d.id)).toEqual(['g1', 'g2', 'g3']);
  });

  it('done only when everything is submitted or skipped', () => {
    expect(session.done).toBe(false);
    for (const d of queue(4)) session.markSubmitted(d.id);
    expect(session.done).toBe(true);
  });

  it('skips carry a note without counting as submissions', () => {
    session.markSkipped('g0', 'broken image');
    expect(session.skipped.get('g0')).toBe('broken image');
    expect(session.submitted.has('g0')).toBe(false);
  });

  it('corrupt draft storage is discarded quietly', () => {
    storage.setItem('smokegen-annotation-drafts', '{oops');
    const fresh = new AnnotationSession(storage);
    fresh.load(queue(1));
    expect(fresh.draftFor('g0').color).toBeNull();
  });
});
