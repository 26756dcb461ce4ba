import { METRICS, ScoreDraft } from './types.js';

export interface ValidationResult {
  ok: boolean;
  errors: Partial<Record<keyof ScoreDraft, string>>;
}

/** Client-side bounds are a strict subset of what the server accepts:
 * integers 0-10 by default, halves allowed only when halfPoint is on. */
export function validateDraft(draft: ScoreDraft, halfPoint = false): ValidationResult {
  const errors: ValidationResult['errors'] = {};
  for (const metric of METRICS) {
    const value = draft[metric];
    if (value === null || Number.isNaN(value)) {
      errors[metric] = 'required';
      continue;
    }
    if (value < 0 || value > 10) {
      errors[metric] = 'must be between 0 and 10';
      continue;
    }
    const step = halfPoint ? 0.5 : 1;
    if (Math.round(value / step) * step !== value) {
      errors[metric] = halfPoint ? 'use half-point steps' : 'use whole numbers';
    }
  }
  return { ok: Object.keys(errors).length === 0, errors };
}

export function clampScore(value: number): number {
  return Math.min(10, Math.max(0, value));
}
