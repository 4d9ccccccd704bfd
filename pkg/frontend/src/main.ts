import { ServiceClient } from "./api.js";
import { SessionFlow } from "./model.js";
import { ConsoleUi } from "./ui.js";

const base = document.body.dataset.serviceUrl ?? "";
const flow = new SessionFlow(new ServiceClient(base));
new ConsoleUi(flow, document.getElementById("app")!);
