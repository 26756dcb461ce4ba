export interface SampleDescriptor {
  id: string;
  image_url: string;
  mask_url: string | null;
}

export type MetricName = 'color' | 'visibility' | 'translucency';

export const METRICS: MetricName[] = ['color', 'visibility', 'translucency'];

export interface ScoreDraft {
  color: number | null;
  visibility: number | null;
  translucency: number | null;
}

export interface Progress {
  scored: number;
  total: number;
}

export const EMPTY_DRAFT: ScoreDraft = { color: null, visibility: null, translucency: null };

export const RUBRIC_HINTS: Record<MetricName, string> = {
  color:
    'Color 0-10. Smoke that blends into the background or looks overly white sits around 5; invisible smoke scores 0-2 on every metric.',
  visibility:
    'Visibility 0-10. Can you actually see discrete smoke? Barely visible generations score 0-2 across the board.',
  translucency:
    'Semi-transparency 0-10. Fully transparent smoke belongs in 8-10; dense opaque fill scores low.',
};
