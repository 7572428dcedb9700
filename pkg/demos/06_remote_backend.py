"""
Serving a backend over the wire protocol
========================================

Any backend can be served over newline-delimited JSON frames (TCP here,
stdio pipes work the same). The remote client implements the identical
scoring contract, so the pipeline cannot tell the difference. A real
model server (see the sidecar package) speaks the same protocol.
"""

import numpy as np

from recurseg import RemoteBackend, ToyBackend, ToySceneSpec
from recurseg.protocol import BackendServer

scene = ToySceneSpec.random(seed=5, n_planted=2)
image = scene.render()
texts = [c.text for c in scene.planted] + ["spaceship"]

# serve the toy backend on an ephemeral local port
server = BackendServer(ToyBackend(scene), "127.0.0.1", 0)
server.serve_in_thread()
host, port = server.address
print(f"serving toy backend at {host}:{port}")

client = RemoteBackend(host, port)
remote_logits = client.score([image], texts)
local_logits = ToyBackend(scene).score([image], texts)
print("remote logits:", np.round(remote_logits[0], 3))
print("local logits: ", np.round(local_logits[0], 3))
print("max difference:", np.abs(remote_logits - local_logits).max())

bundle = client.activations(image, texts, bg_texts=["sky"])
k, h, w = bundle.features.shape
print(f"\nactivations over the wire: features {k}x{h}x{w}, "
      f"grads {bundle.grads.shape}, attn {bundle.attn.shape}")

client.close()
server.shutdown()
server.server_close()
print("server stopped")
