"""Regenerates the binary fixtures in this directory with NumPy and zipfile.

Run from any directory: python3 make_fixtures.py
"""
import json
import os
import zipfile
import io

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
rng = np.random.default_rng(20240501)
expected = {}


def save(name, arr, version=None):
    path = os.path.join(HERE, name)
    with open(path, "wb") as f:
        np.lib.format.write_array(f, arr, version=version, allow_pickle=False)
    flat = np.asarray(arr).ravel(order="C")
    if arr.dtype.kind in "SU":
        values = [v.decode("latin-1") if isinstance(v, bytes) else str(v) for v in flat]
    elif arr.dtype.kind == "b":
        values = [bool(v) for v in flat]
    elif arr.dtype.kind == "f":
        values = [float(v) for v in flat]
    else:
        values = [int(v) for v in flat]
    expected[name] = {"shape": list(arr.shape), "descr": arr.dtype.str, "values": values}


save("f4_3x2.npy", rng.standard_normal((3, 2)).astype("<f4"))
save("f8_2x3x2.npy", rng.standard_normal((2, 3, 2)))
save("i4_vec.npy", np.array([-7, 0, 2147483647, -2147483648], dtype="<i4"))
save("i8_2x2.npy", np.array([[-(2 ** 62), 5], [7, 2 ** 62]], dtype="<i8"))
save("b1_5.npy", np.array([True, False, True, True, False]))
save("S5_3.npy", np.array([b"1abcA", b"x", b"xyz"], dtype="|S5"))
save("U4_2.npy", np.array(["AGV", "HHEC"], dtype="<U4"))
save("f8_scalar.npy", np.array(3.5))
save("f8_v2.npy", rng.standard_normal((4, 2)), version=(2, 0))

m = rng.standard_normal((2, 3))
save("f8_2x3_c.npy", np.ascontiguousarray(m))
save("f8_2x3_fortran.npy", np.asfortranarray(m))
mi = np.arange(12, dtype="<i4").reshape(3, 4)
save("i4_3x4_fortran.npy", np.asfortranarray(mi))

a = np.array([1.0])
b = np.array([2.0])
np.savez(os.path.join(HERE, "ab_stored.npz"), a=a, b=b)
big = {"x": rng.standard_normal((40, 8)), "ids": np.array([b"P1", b"P2"], dtype="|S2")}
np.savez(os.path.join(HERE, "mixed_stored.npz"), **big)
np.savez_compressed(os.path.join(HERE, "mixed_deflate.npz"), **big)
expected["mixed.npz"] = {"x": [float(v) for v in big["x"].ravel()], "ids": ["P1", "P2"]}

# Empty archive written by zipfile directly.
with zipfile.ZipFile(os.path.join(HERE, "empty.npz"), "w") as z:
    pass

# An archive whose member uses bzip2 (method 12): unsupported.
with zipfile.ZipFile(os.path.join(HERE, "bzip2.npz"), "w", compression=zipfile.ZIP_BZIP2) as z:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, a)
    z.writestr("a.npy", buf.getvalue())

# NetSurfP-style archive: 68 columns, AA one-hot [0,20) in ACDEFGHIKLMNPQRSTVWY
# order, mask column 50, Q8 one-hot [57,65) in GHIBESTC order.
AA = "ACDEFGHIKLMNPQRSTVWY"
Q8 = "GHIBESTC"
proteins = [("1abcA", "MKVLAGHE", "CHHHHEEC", "11111111"), ("2xyzB", "GAVX", "HHEC", "1110")]
lmax = 10
data = np.zeros((len(proteins), lmax, 68), dtype="<f4")
for p, (pid, seq, q8, mask) in enumerate(proteins):
    for i, ch in enumerate(seq):
        if ch in AA:
            data[p, i, AA.index(ch)] = 1.0
        data[p, i, 50] = float(mask[i])
        data[p, i, 57 + Q8.index(q8[i])] = 1.0
        data[p, i, 20:40] = rng.uniform(0, 1, 20)  # profile block, fractional
np.savez_compressed(os.path.join(HERE, "netsurf_small.npz"),
                    data=data, pdbids=np.array([p[0] for p in proteins], dtype="|S5"))

with open(os.path.join(HERE, "expected.json"), "w") as f:
    json.dump(expected, f, indent=1, sort_keys=True)
