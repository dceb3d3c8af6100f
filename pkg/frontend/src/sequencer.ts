// Last-writer-wins gate for async responses: every request takes a sequence
// number; a response is applied only if nothing newer was applied already,
// so a delayed older response can never overwrite a newer map.

export class ResponseSequencer {
  private nextSeq = 1;
  private lastApplied = 0;

  issue(): number {
    return this.nextSeq++;
  }

  /** True if the response for `seq` should be applied now. */
  accept(seq: number): boolean {
    if (seq <= this.lastApplied) return false;
    this.lastApplied = seq;
    return true;
  }

  newestIssued(): number {
    return this.nextSeq - 1;
  }

  appliedSeq(): number {
    return this.lastApplied;
  }
}
