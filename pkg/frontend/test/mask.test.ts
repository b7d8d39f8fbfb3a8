import { describe, expect, it } from "vitest";

import { GroupMaskState } from "../src/mask";

describe("GroupMaskState", () => {
  it("starts with every listed group visible", () => {
    const mask = new GroupMaskState([0, 2, 5]);
    expect(mask.maskValue()).toBe(0b100101);
    expect(mask.isEnabled(2)).toBe(true);
    expect(mask.isEnabled(1)).toBe(false);
  });

  it("toggles bits off and back on", () => {
    const mask = new GroupMaskState([0, 2, 5]);
    mask.toggle(2);
    expect(mask.maskValue()).toBe(0b100001);
    expect(mask.isEnabled(2)).toBe(false);
    mask.toggle(2);
    expect(mask.maskValue()).toBe(0b100101);
  });

  it("reports all-off with a zero mask", () => {
    const mask = new GroupMaskState([3, 7]);
    mask.toggle(3);
    mask.toggle(7);
    expect(mask.allOff()).toBe(true);
    expect(mask.maskValue()).toBe(0);
  });

  it("covers the full 12-bit range", () => {
    const mask = new GroupMaskState([...Array(12).keys()]);
    expect(mask.maskValue()).toBe(4095);
  });
});
