import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // the end-to-end suite spawns a Python session server
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
