import { SessionClient } from "./api.js";
import { AppView } from "./app.js";

// Service base URL: ?service=http://host:port overrides; otherwise the page
// origin (the service can host this console directly under /ui).
const params = new URLSearchParams(window.location.search);
const base = params.get("service") ?? window.location.origin;

const root = document.getElementById("app");
if (!root) {
    throw new Error("missing #app mount point");
}
new AppView(root, new SessionClient(base));
