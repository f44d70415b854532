import type { EditResponse, ModelInfo, RegressResponse, ServiceClient } from "./types.js";

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    const body = await resp.text().catch(() => "");
    throw new Error(`service ${resp.status}: ${body.slice(0, 300)}`);
  }
  return (await resp.json()) as T;
}

export class HttpServiceClient implements ServiceClient {
  constructor(private readonly baseUrl: string = "") {}

  modelInfo(): Promise<ModelInfo> {
    return fetch(`${this.baseUrl}/model/info`).then((r) => asJson<ModelInfo>(r));
  }

  edit(imageB64: string, params: number[]): Promise<EditResponse> {
    return fetch(`${this.baseUrl}/edit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_b64: imageB64, mode: "edit", params }),
    }).then((r) => asJson<EditResponse>(r));
  }

  regress(imageB64: string): Promise<RegressResponse> {
    return fetch(`${this.baseUrl}/regress`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_b64: imageB64 }),
    }).then((r) => asJson<RegressResponse>(r));
  }
}
