import { EngineClient } from "./api.js";
import { mountApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("engine") ?? "";

const app = mountApp({
  client: new EngineClient(base),
  root: document.getElementById("app")!,
  storage: window.localStorage,
});

void app.restoreLastSession();
