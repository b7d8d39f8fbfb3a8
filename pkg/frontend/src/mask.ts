/** Visibility state for the anatomy group toggles. */

export class GroupMaskState {
  private readonly enabled: Set<number>;

  /** All listed groups start visible. */
  constructor(groupIds: readonly number[]) {
    this.enabled = new Set(groupIds);
  }

  isEnabled(group: number): boolean {
    return this.enabled.has(group);
  }

  toggle(group: number): void {
    if (this.enabled.has(group)) {
      this.enabled.delete(group);
    } else {
      this.enabled.add(group);
    }
  }

  /** 12-bit integer for the /render group_mask parameter. */
  maskValue(): number {
    let mask = 0;
    for (const group of this.enabled) {
      mask |= 1 << group;
    }
    return mask;
  }

  allOff(): boolean {
    return this.enabled.size === 0;
  }
}
