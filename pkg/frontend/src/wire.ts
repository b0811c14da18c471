/**
 * Client side of the job event stream.
 *
 * The service sends one JSON text envelope per event; "partial" envelopes
 * are followed by one binary message carrying the slab as float64
 * little-endian values, row-major.  `seq` is strictly increasing per job:
 * events arriving out of order are buffered and released in order, and a
 * gap still open at completion is reported as an integrity problem.
 */

export type PartialEnvelope = {
  type: 'partial';
  job_id: string;
  seq: number;
  partition_index: number;
  frame_start: number;
  frame_count: number;
  kind: 'scan' | 'sig';
  shape: number[];
};

export type CompleteEnvelope = {
  type: 'complete';
  job_id: string;
  seq: number;
  status: 'done';
  partitions: number;
  channels: string[];
  result_kind: 'scan' | 'sig';
  scan_shape: number[];
  sig_shape: number[];
  checksums: number[];
  non_local_fraction: number;
};

export type EndEnvelope = {
  type: 'end';
  job_id: string;
  seq: number;
  status: 'cancelled' | 'failed';
  error: string | null;
};

export type Envelope = PartialEnvelope | CompleteEnvelope | EndEnvelope;

export type StreamEvent =
  | { kind: 'partial'; envelope: PartialEnvelope; slab: Float64Array }
  | { kind: 'complete'; envelope: CompleteEnvelope; checksumOk: boolean }
  | { kind: 'end'; envelope: EndEnvelope }
  | { kind: 'integrity'; message: string };

/** Relative tolerance for checksum comparison: the server sums each slab
 * with pairwise reduction, the client sequentially, so the float64 results
 * may differ in the last bits. */
const CHECKSUM_RTOL = 1e-9;

export function decodeSlab(buf: ArrayBuffer): Float64Array {
  // the wire is little-endian by contract; go through DataView so the
  // client is correct on big-endian hosts too
  const view = new DataView(buf);
  const n = buf.byteLength / 8;
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) out[i] = view.getFloat64(i * 8, true);
  return out;
}

export class JobStream {
  private nextSeq = 0;
  private buffered = new Map<number, StreamEvent>();
  private awaitingSlab: PartialEnvelope | null = null;
  private channelSums: number[] | null = null;
  private finished = false;

  constructor(private emit: (ev: StreamEvent) => void) {}

  /** Call when the transport closes: events still buffered behind a seq
   * gap at that point will never be released. */
  finish(): void {
    if (!this.finished && this.buffered.size > 0) {
      this.emit({
        kind: 'integrity',
        message: `stream closed with ${this.buffered.size} unreleased event(s)`,
      });
    }
    this.finished = true;
  }

  handleText(raw: string): void {
    const envelope = JSON.parse(raw) as Envelope;
    if (envelope.type === 'partial') {
      this.awaitingSlab = envelope;
      return;
    }
    if (envelope.type === 'complete') {
      this.enqueue(envelope.seq, {
        kind: 'complete',
        envelope,
        checksumOk: true, // verified when released in order
      });
    } else {
      this.enqueue(envelope.seq, { kind: 'end', envelope });
    }
  }

  handleBinary(buf: ArrayBuffer): void {
    const envelope = this.awaitingSlab;
    if (!envelope) {
      this.emit({ kind: 'integrity', message: 'binary frame without envelope' });
      return;
    }
    this.awaitingSlab = null;
    this.enqueue(envelope.seq, {
      kind: 'partial',
      envelope,
      slab: decodeSlab(buf),
    });
  }

  private enqueue(seq: number, ev: StreamEvent): void {
    this.buffered.set(seq, ev);
    while (this.buffered.has(this.nextSeq)) {
      const next = this.buffered.get(this.nextSeq)!;
      this.buffered.delete(this.nextSeq);
      this.nextSeq += 1;
      this.release(next);
    }
  }

  private release(ev: StreamEvent): void {
    if (this.finished) return;
    if (ev.kind === 'partial') {
      this.accumulate(ev.envelope, ev.slab);
    } else if (ev.kind === 'complete') {
      this.finished = true;
      if (this.buffered.size > 0) {
        this.emit({
          kind: 'integrity',
          message: `completion with ${this.buffered.size} unresolved event(s)`,
        });
      }
      ev = { ...ev, checksumOk: this.verify(ev.envelope.checksums) };
    } else if (ev.kind === 'end') {
      this.finished = true;
    }
    this.emit(ev);
  }

  private accumulate(envelope: PartialEnvelope, slab: Float64Array): void {
    const channels = envelope.kind === 'scan' ? envelope.shape[1] : 1;
    if (!this.channelSums) this.channelSums = new Array(channels).fill(0);
    if (envelope.kind === 'scan') {
      for (let i = 0; i < slab.length; i++) {
        this.channelSums[i % channels] += slab[i];
      }
    } else {
      for (let i = 0; i < slab.length; i++) this.channelSums[0] += slab[i];
    }
  }

  private verify(expected: number[]): boolean {
    const got = this.channelSums ?? new Array(expected.length).fill(0);
    if (got.length !== expected.length) return false;
    return expected.every((want, i) => {
      const scale = Math.max(Math.abs(want), Math.abs(got[i]), 1e-300);
      return Math.abs(got[i] - want) / scale <= CHECKSUM_RTOL;
    });
  }
}
