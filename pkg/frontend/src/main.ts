import { HttpServiceClient } from "./client.js";
import { SliderConsole, UiState } from "./console.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

function fileToB64(file: File): Promise<string> {
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => {
      const url = String(reader.result);
      resolve(url.slice(url.indexOf(",") + 1)); // strip data: prefix
    };
    reader.onerror = () => reject(reader.error);
    reader.readAsDataURL(file);
  });
}

function render(state: UiState, ui: ReturnType<typeof collectUi>): void {
  ui.banner.style.display = state.phase === "error" ? "block" : "none";
  ui.banner.textContent = state.error ?? "";
  ui.notice.textContent = state.notice ?? state.transferError ?? "";
  ui.busy.style.visibility = state.busy ? "visible" : "hidden";
  ui.latency.textContent =
    state.lastResponseMs !== undefined ? `${state.lastResponseMs} ms` : "";
  if (state.displayedImage) {
    ui.preview.src = `data:image/png;base64,${state.displayedImage}`;
  }
  if (state.targetImage) {
    ui.target.src = `data:image/png;base64,${state.targetImage}`;
    ui.target.style.display = "inline-block";
  }
  ui.scrub.disabled = !state.transferEnabled;
  for (let k = 0; k < state.sliders.length; k++) {
    const input = ui.sliderInputs[k];
    if (input && document.activeElement !== input) {
      input.value = String(state.sliders[k].value);
    }
    const label = ui.sliderValues[k];
    if (label) label.textContent = state.sliders[k].value.toFixed(2);
  }
}

function collectUi() {
  return {
    banner: $("banner"),
    notice: $("notice"),
    busy: $("busy"),
    latency: $("latency"),
    preview: $<HTMLImageElement>("preview"),
    target: $<HTMLImageElement>("target-preview"),
    scrub: $<HTMLInputElement>("scrub"),
    sliders: $("sliders"),
    sliderInputs: [] as HTMLInputElement[],
    sliderValues: [] as HTMLElement[],
  };
}

async function boot(): Promise<void> {
  const client = new HttpServiceClient("");
  const console_ = new SliderConsole(client);
  const ui = collectUi();
  console_.subscribe((s) => render(s, ui));

  $("retry").onclick = () => void console_.init();
  $<HTMLInputElement>("source-file").onchange = async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) console_.setSource(await fileToB64(file));
  };
  $<HTMLInputElement>("target-file").onchange = async (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) await console_.setTarget(await fileToB64(file));
  };
  ui.scrub.oninput = () => console_.scrub(Number(ui.scrub.value));
  $("reset").onclick = () => console_.reset();

  await console_.init();
  const info = console_.modelInfo;
  if (!info) return;

  ui.sliders.innerHTML = "";
  for (let k = 0; k < info.n_params; k++) {
    const row = document.createElement("div");
    row.className = "slider-row";
    const name = document.createElement("label");
    name.textContent = `${info.labels[k]} (scale ${info.scales[k].toFixed(3)})`;
    const input = document.createElement("input");
    input.type = "range";
    input.min = "-1";
    input.max = "1";
    input.step = "0.01";
    input.value = "0";
    input.oninput = () => console_.onSliderChange(k, Number(input.value));
    const value = document.createElement("span");
    value.textContent = "0.00";
    row.append(name, input, value);
    ui.sliders.append(row);
    ui.sliderInputs.push(input);
    ui.sliderValues.push(value);
  }
}

void boot();
