import json
import os
import subprocess
import sys

import pytest

PROBE = os.path.join(os.path.dirname(__file__), "_backend_probe.py")


def probe(jit_flag):
    env = dict(os.environ, STOPLAB_JIT=jit_flag)
    res = subprocess.run([sys.executable, PROBE], env=env, capture_output=True,
                         text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    return json.loads(res.stdout)


def test_fallback_matches_compiled_kernels():
    fast = probe("1")
    slow = probe("0")
    assert fast.pop("backend") == "numba"
    assert slow.pop("backend") == "numpy"
    assert fast.keys() == slow.keys()
    for key, a in fast.items():
        b = slow[key]
        if isinstance(a, float):
            assert a == pytest.approx(b, abs=1e-12), key
        else:
            assert a == b, key
