import { apiUrl, fetchProgress, fetchQueue, postScore, setApiBase } from './api.js';
import { AnnotationSession, StorageLike } from './session.js';
import { METRICS, MetricName, RUBRIC_HINTS } from './types.js';
import { validateDraft } from './validation.js';

export interface AppOptions {
  base?: string;
  halfPoint?: boolean;
  queueSize?: number;
  storage?: StorageLike | null;
}

const TEMPLATE = `
  <header class="bar">
    <strong>smoke scoring</strong>
    <span id="progress" data-test="progress">–</span>
  </header>
  <div id="banner" class="banner hidden" data-test="banner">
    Network trouble: the score was kept as a draft. <button id="retry">Retry</button>
  </div>
  <main class="columns">
    <figure class="viewer">
      <div class="frame">
        <img id="image" alt="sample under review" />
        <img id="overlay" class="overlay hidden" alt="" />
      </div>
      <figcaption>
        <span id="sample-id"></span>
        <button id="mask-toggle" class="hidden" title="shortcut: m">mask overlay</button>
        <button id="skip" title="broken image? skip with a note">skip</button>
        <span id="skip-note" class="note hidden">marked broken, not submitted</span>
      </figcaption>
    </figure>
    <section class="panel">
      <div id="metrics"></div>
      <div class="actions">
        <button id="prev" title="shortcut: left arrow">&#8592; prev</button>
        <button id="submit" disabled title="shortcut: Enter">submit</button>
        <button id="next" title="shortcut: right arrow">next &#8594;</button>
      </div>
      <p id="status" class="note" data-test="status"></p>
      <aside id="rubric" class="rubric"></aside>
      <p class="note">keys: digits set the highlighted metric, arrows move, Enter submits, m toggles the mask</p>
    </section>
  </main>
`;

function metricRow(metric: MetricName, step: number): string {
  return `
    <div class="metric" data-metric="${metric}">
      <label for="metric-${metric}">${metric === 'translucency' ? 'semi-transparency' : metric}</label>
      <input type="range" min="0" max="10" step="${step}" id="metric-${metric}" />
      <input type="number" min="0" max="10" step="${step}" id="metric-${metric}-num" />
      <span class="error" id="error-${metric}" data-test="error-${metric}"></span>
    </div>
  `;
}

export class AnnotatorApp {
  session: AnnotationSession;
  activeMetric: MetricName = 'color';
  halfPoint: boolean;
  private queueSize: number;
  private root: HTMLElement;

  constructor(root: HTMLElement, opts: AppOptions = {}) {
    this.root = root;
    this.halfPoint = opts.halfPoint ?? false;
    this.queueSize = opts.queueSize ?? 50;
    if (opts.base) setApiBase(opts.base);
    const storage =
      opts.storage !== undefined
        ? opts.storage
        : typeof localStorage !== 'undefined'
          ? localStorage
          : null;
    this.session = new AnnotationSession(storage);
  }

  el<T extends HTMLElement>(selector: string): T {
    const node = this.root.querySelector(selector);
    if (!node) throw new Error(`missing element ${selector}`);
    return node as T;
  }

  async start(): Promise<void> {
    this.root.innerHTML = TEMPLATE;
    const step = this.halfPoint ? 0.5 : 1;
    this.el('#metrics').innerHTML = METRICS.map((m) => metricRow(m, step)).join('');
    this.el('#rubric').innerHTML = METRICS.map(
      (m) => `<p><strong>${m === 'translucency' ? 'semi-transparency' : m}</strong>: ${RUBRIC_HINTS[m]}</p>`
    ).join('');
    this.wire();
    this.session.load(await fetchQueue(this.queueSize));
    await this.refreshProgress();
    this.render();
  }

  private wire(): void {
    for (const metric of METRICS) {
      const range = this.el<HTMLInputElement>(`#metric-${metric}`);
      const num = this.el<HTMLInputElement>(`#metric-${metric}-num`);
      const onInput = (value: string) => {
        this.activeMetric = metric;
        this.setMetric(metric, value === '' ? null : Number(value));
      };
      range.addEventListener('input', () => onInput(range.value));
      num.addEventListener('input', () => onInput(num.value));
      range.addEventListener('focus', () => this.setActive(metric));
      num.addEventListener('focus', () => this.setActive(metric));
    }
    this.el('#submit').addEventListener('click', () => void this.submit());
    this.el('#retry').addEventListener('click', () => void this.submit());
    this.el('#next').addEventListener('click', () => this.navigate(+1));
    this.el('#prev').addEventListener('click', () => this.navigate(-1));
    this.el('#mask-toggle').addEventListener('click', () => this.toggleMask());
    this.el('#skip').addEventListener('click', () => this.skipCurrent('skipped by annotator'));
    this.el<HTMLImageElement>('#image').addEventListener('error', () => {
      this.el('#skip-note').textContent = 'image failed to load; use skip to quarantine';
      this.el('#skip-note').classList.remove('hidden');
    });
    this.root.ownerDocument.addEventListener('keydown', (event) => this.handleKey(event));
  }

  setActive(metric: MetricName): void {
    this.activeMetric = metric;
    for (const m of METRICS) {
      this.el(`.metric[data-metric="${m}"]`).classList.toggle('active', m === metric);
    }
  }

  setMetric(metric: MetricName, value: number | null): void {
    const sample = this.session.current;
    if (!sample) return;
    this.session.setScore(sample.id, metric, value);
    this.render();
  }

  navigate(step: number): void {
    if (step > 0) this.session.advance();
    else this.session.back();
    this.clearTransientUi();
    this.render();
  }

  toggleMask(): void {
    this.el('#overlay').classList.toggle('hidden');
  }

  skipCurrent(note: string): void {
    const sample = this.session.current;
    if (!sample) return;
    this.session.markSkipped(sample.id, note);
    this.el('#status').textContent = `skipped ${sample.id} (${note})`;
    this.session.advance();
    this.render();
  }

  async submit(): Promise<void> {
    const sample = this.session.current;
    if (!sample) return;
    const draft = this.session.draftFor(sample.id);
    if (!validateDraft(draft, this.halfPoint).ok) return;
    const outcome = await postScore(sample.id, draft);
    if (outcome.status === 'created') {
      this.session.markSubmitted(sample.id);
      this.el('#banner').classList.add('hidden');
      this.el('#status').textContent = `saved ${sample.id}`;
      this.session.advance();
      await this.refreshProgress();
      this.render();
      return;
    }
    if (outcome.status === 'invalid') {
      for (const [field, message] of Object.entries(outcome.errors)) {
        const node = this.root.querySelector(`#error-${field}`);
        if (node) node.textContent = message;
      }
      this.el('#status').textContent = 'the server rejected the score';
      return;
    }
    if (outcome.status === 'unknown-id') {
      this.el('#status').textContent = `sample ${sample.id} is gone server-side; skipping`;
      this.skipCurrent('unknown on server');
      return;
    }
    this.el('#banner').classList.remove('hidden');
  }

  async refreshProgress(): Promise<void> {
    const progress = await fetchProgress();
    this.el('#progress').textContent = `${progress.scored} / ${progress.total} scored`;
  }

  handleKey(event: KeyboardEvent): void {
    if (event.key >= '0' && event.key <= '9') {
      this.setMetric(this.activeMetric, Number(event.key));
      return;
    }
    switch (event.key) {
      case 'Enter':
        void this.submit();
        break;
      case 'ArrowRight':
        this.navigate(+1);
        break;
      case 'ArrowLeft':
        this.navigate(-1);
        break;
      case 'ArrowUp':
      case 'ArrowDown': {
        const sample = this.session.current;
        if (!sample) return;
        const delta = (event.key === 'ArrowUp' ? 1 : -1) * (this.halfPoint ? 0.5 : 1);
        const current = this.session.draftFor(sample.id)[this.activeMetric] ?? 0;
        this.setMetric(this.activeMetric, Math.min(10, Math.max(0, current + delta)));
        break;
      }
      case 'm':
        this.toggleMask();
        break;
    }
  }

  private clearTransientUi(): void {
    this.el('#status').textContent = '';
    this.el('#skip-note').classList.add('hidden');
    for (const metric of METRICS) {
      this.el(`#error-${metric}`).textContent = '';
    }
  }

  render(): void {
    const sample = this.session.current;
    const image = this.el<HTMLImageElement>('#image');
    const overlay = this.el<HTMLImageElement>('#overlay');
    const toggle = this.el('#mask-toggle');
    if (!sample) {
      this.el('#sample-id').textContent = this.session.done ? 'all samples scored' : 'queue empty';
      this.el<HTMLButtonElement>('#submit').disabled = true;
      return;
    }
    this.el('#sample-id').textContent = sample.id;
    image.src = apiUrl(sample.image_url);
    if (sample.mask_url) {
      overlay.src = apiUrl(sample.mask_url);
      toggle.classList.remove('hidden');
    } else {
      overlay.classList.add('hidden');
      toggle.classList.add('hidden');
    }
    const draft = this.session.draftFor(sample.id);
    for (const metric of METRICS) {
      const value = draft[metric];
      this.el<HTMLInputElement>(`#metric-${metric}`).value = value === null ? '5' : String(value);
      this.el<HTMLInputElement>(`#metric-${metric}-num`).value = value === null ? '' : String(value);
      const check = validateDraft(draft, this.halfPoint);
      this.el(`#error-${metric}`).textContent =
        value !== null && check.errors[metric] ? check.errors[metric]! : '';
    }
    this.el<HTMLButtonElement>('#submit').disabled = !validateDraft(draft, this.halfPoint).ok;
    this.setActive(this.activeMetric);
  }
}

export async function mountApp(root: HTMLElement, opts: AppOptions = {}): Promise<AnnotatorApp> {
  const app = new AnnotatorApp(root, opts);
  await app.start();
  return app;
}

// static-page entry: index.html provides #annotator
if (typeof document !== 'undefined') {
  const node = document.getElementById('annotator');
  if (node) {
    const params = new URLSearchParams(window.location.search);
    void mountApp(node, { halfPoint: params.get('half') === '1' });
  }
}
