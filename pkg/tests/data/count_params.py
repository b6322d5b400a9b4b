"""Independent shape walk of the default early-concat UNet (levels 2, F 8).

Run once to regenerate ``unet_param_count.json``; it deliberately does not
import the package.
"""
import json
import os

F, IN, OUT = 8, 2, 2


def conv(c_in, c_out, k=3):
    return c_out * c_in * k**3 + c_out


layers = {
    "stem": conv(IN, F),
    "down1": conv(F, 2 * F),
    "bottleneck": conv(2 * F, 2 * F),
    "up1": conv(2 * F, F),
    "fuse1": conv(F + F, F),
    "head": conv(F, OUT, k=1),
}
out = {"levels": 2, "base_features": F, "layers": layers, "total": sum(layers.values())}
with open(os.path.join(os.path.dirname(__file__), "unet_param_count.json"), "w") as fh:
    json.dump(out, fh, indent=2)
print(out["total"])
