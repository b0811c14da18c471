/**
 * Thin REST + WebSocket client for the processing service.  All traffic
 * the UI produces goes through this module, which makes "no network
 * before Apply" checkable by instrumenting one object.
 */

import { DatasetSummary } from './state.js';
import { JobStream, StreamEvent } from './wire.js';

type FetchLike = typeof fetch;

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

export class ApiClient {
  constructor(
    private base = '',
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async call<T>(method: string, path: string, body?: object): Promise<T> {
    const res = await this.fetchImpl(this.base + path, {
      method,
      headers: body ? { 'content-type': 'application/json' } : undefined,
      body: body ? JSON.stringify(body) : undefined,
    });
    const payload = await res.json();
    if (!res.ok) {
      throw new ApiError(res.status, payload.detail ?? res.statusText);
    }
    return payload as T;
  }

  listDatasets(): Promise<DatasetSummary[]> {
    return this.call('GET', '/api/datasets');
  }

  openDataset(path: string): Promise<DatasetSummary> {
    return this.call('POST', '/api/datasets/open', { path });
  }

  createAnalysis(datasetId: string, spec: object): Promise<{ analysis_id: string }> {
    return this.call('POST', '/api/analyses', { dataset_id: datasetId, spec });
  }

  updateAnalysis(analysisId: string, spec: object): Promise<{ analysis_id: string }> {
    return this.call('PATCH', `/api/analyses/${analysisId}`, { spec });
  }

  startJob(analysisId: string): Promise<{ job_id: string; partitions: number }> {
    return this.call('POST', '/api/jobs', { analysis_id: analysisId });
  }

  cancelJob(jobId: string): Promise<{ job_id: string }> {
    return this.call('DELETE', `/api/jobs/${jobId}`);
  }

  /** Subscribe to a job's event stream; returns a close function. */
  subscribe(jobId: string, onEvent: (ev: StreamEvent) => void): () => void {
    const proto = location.protocol === 'https:' ? 'wss:' : 'ws:';
    const ws = new WebSocket(`${proto}//${location.host}/api/events`);
    const stream = new JobStream(onEvent);
    ws.binaryType = 'arraybuffer';
    ws.onopen = () => ws.send(JSON.stringify({ subscribe: jobId }));
    ws.onmessage = (msg) => {
      if (typeof msg.data === 'string') stream.handleText(msg.data);
      else stream.handleBinary(msg.data as ArrayBuffer);
    };
    ws.onclose = () => stream.finish();
    return () => ws.close();
  }
}
