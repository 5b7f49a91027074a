import { defineConfig } from "vitest/config";

// Unit tests run anywhere; the integration project boots the real Python
// service (see tests/serviceSetup.ts) and needs it importable.
export default defineConfig({
  test: {
    projects: [
      {
        test: {
          name: "unit",
          environment: "happy-dom",
          include: ["tests/**/*.test.ts"],
          exclude: ["tests/integration.test.ts", "**/node_modules/**"],
        },
      },
      {
        test: {
          name: "integration",
          environment: "node",
          include: ["tests/integration.test.ts"],
          globalSetup: ["./tests/serviceSetup.ts"],
          testTimeout: 240_000,
          hookTimeout: 240_000,
        },
      },
    ],
  },
});
