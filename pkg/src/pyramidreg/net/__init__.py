"""Dual-stream pyramid registration network."""
from .attention import correlation, global_attention, lgam, local_attention, pam
from .decoder import cwam, fifm, idm
from .encoder import encode
from .fusion import msfm
from .model import ForwardResult, NetConfig, flow_heads, forward, init_params

__all__ = [
    "NetConfig", "ForwardResult", "init_params", "forward", "flow_heads",
    "encode", "msfm", "correlation", "pam", "global_attention", "local_attention", "lgam",
    "idm", "cwam", "fifm",
]
