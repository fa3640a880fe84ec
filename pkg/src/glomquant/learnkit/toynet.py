"""A small encoder/predictor pair with hand-written backprop.

encoder:   x -> tanh(x W1 + b1) -> z = h W2 + b2
predictor: z -> tanh(z W3 + b3) -> p = g W4 + b4
"""

import json
from pathlib import Path

import numpy as np

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")
ENCODER_PARAMS = ("W1", "b1", "W2", "b2")


class ToyNet:
    def __init__(self, input_dim=16, hidden=32, embed=16, pred_hidden=16, seed=0, params=None):
        self.dims = (input_dim, hidden, embed, pred_hidden)
        if params is not None:
            self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_ORDER}
            return
        rng = np.random.default_rng(seed)

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        self.params = {
            "W1": dense(input_dim, hidden),
            "b1": np.zeros(hidden),
            "W2": dense(hidden, embed),
            "b2": np.zeros(embed),
            "W3": dense(embed, pred_hidden),
            "b3": np.zeros(pred_hidden),
            "W4": dense(pred_hidden, embed),
            "b4": np.zeros(embed),
        }

    def encode(self, x, cache=None):
        P = self.params
        h = np.tanh(x @ P["W1"] + P["b1"])
        z = h @ P["W2"] + P["b2"]
        if cache is not None:
            cache.update(x=x, h=h)
        return z

    def predict(self, z, cache=None):
        P = self.params
        g = np.tanh(z @ P["W3"] + P["b3"])
        p = g @ P["W4"] + P["b4"]
        if cache is not None:
            cache.update(z=z, g=g)
        return p

    def forward(self, x):
        enc, pred = {}, {}
        z = self.encode(x, enc)
        p = self.predict(z, pred)
        return z, p, (enc, pred)

    def backward(self, caches, dp, dz_direct=None):
        """Gradients of all parameters given dL/dp and an optional direct dL/dz."""
        P = self.params
        enc, pred = caches
        grads = {}
        g = pred["g"]
        grads["W4"] = g.T @ dp
        grads["b4"] = dp.sum(axis=0)
        dg = (dp @ P["W4"].T) * (1.0 - g * g)
        grads["W3"] = pred["z"].T @ dg
        grads["b3"] = dg.sum(axis=0)
        dz = dg @ P["W3"].T
        if dz_direct is not None:
            dz = dz + dz_direct
        h = enc["h"]
        grads["W2"] = h.T @ dz
        grads["b2"] = dz.sum(axis=0)
        dh = (dz @ P["W2"].T) * (1.0 - h * h)
        grads["W1"] = enc["x"].T @ dh
        grads["b1"] = dh.sum(axis=0)
        return grads

    def flat(self, names=PARAM_ORDER):
        return np.concatenate([self.params[k].ravel() for k in names])

    def set_flat(self, vec, names=PARAM_ORDER):
        i = 0
        for k in names:
            n = self.params[k].size
            self.params[k][...] = np.reshape(vec[i : i + n], self.params[k].shape)
            i += n

    def encoder_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in ENCODER_PARAMS)

    def save(self, path):
        """Write ``<path>`` (flat little-endian float32) and ``<path>.json`` (shapes)."""
        path = Path(path)
        path.write_bytes(self.flat().astype("<f4").tobytes())
        header = {
            "dtype": "float32",
            "byteorder": "little",
            "dims": list(self.dims),
            "params": [{"name": k, "shape": list(self.params[k].shape)} for k in PARAM_ORDER],
        }
        path.with_name(path.name + ".json").write_text(json.dumps(header, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ToyNet":
        path = Path(path)
        header = json.loads(path.with_name(path.name + ".json").read_text())
        flat = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
        params, i = {}, 0
        for spec in header["params"]:
            n = int(np.prod(spec["shape"]))
            params[spec["name"]] = flat[i : i + n].reshape(spec["shape"])
            i += n
        input_dim, hidden, embed, pred_hidden = header["dims"]
        return cls(input_dim, hidden, embed, pred_hidden, params=params)
