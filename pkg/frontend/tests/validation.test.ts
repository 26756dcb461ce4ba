import { describe, expect, it } from 'vitest';

import { clampScore, validateDraft } from '../src/validation.js';

describe('validateDraft', () => {
  it('accepts whole numbers in range', () => {
    expect(validateDraft({ color: 0, visibility: 10, translucency: 5 }).ok).toBe(true);
  });

  it('requires every metric', () => {
    const result = validateDraft({ color: 5, visibility: null, translucency: 5 });
    expect(result.ok).toBe(false);
    expect(result.errors.visibility).toBe('required');
  });

  it('rejects out-of-range values', () => {
    expect(validateDraft({ color: 11, visibility: 5, translucency: 5 }).ok).toBe(false);
    expect(validateDraft({ color: -1, visibility: 5, translucency: 5 }).ok).toBe(false);
  });

  it('rejects fractions unless half-point mode is on', () => {
    const draft = { color: 7.5, visibility: 5, translucency: 5 };
    expect(validateDraft(draft).ok).toBe(false);
    expect(validateDraft(draft, true).ok).toBe(true);
    expect(validateDraft({ ...draft, color: 7.3 }, true).ok).toBe(false);
  });

  it('half-point mode still enforces the 0-10 bounds', () => {
    expect(validateDraft({ color: 10.5, visibility: 5, translucency: 5 }, true).ok).toBe(false);
  });
});

describe('clampScore', () => {
  it('clamps into [0, 10]', () => {
    expect(clampScore(-3)).toBe(0);
    expect(clampScore(12)).toBe(10);
    expect(clampScore(7)).toBe(7);
  });
});
