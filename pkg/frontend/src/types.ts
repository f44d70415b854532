export interface ModelInfo {
  n_params: number;
  basis_kind: string;
  image_size: number;
  labels: string[];
  scales: number[];
}

export interface EditResponse {
  image_b64: string;
  p_est: number[];
  applied_params: number[];
  resized: boolean;
}

export interface RegressResponse {
  params: number[];
  resized: boolean;
}

/** Transport to the inference service; injected so tests can stub it. */
export interface ServiceClient {
  modelInfo(): Promise<ModelInfo>;
  edit(imageB64: string, params: number[]): Promise<EditResponse>;
  regress(imageB64: string): Promise<RegressResponse>;
}
