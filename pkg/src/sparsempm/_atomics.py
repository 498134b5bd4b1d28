"""Lock-free atomic primitives for use inside numba parallel kernels.

numba ships no CPU atomics, so these intrinsics lower directly to LLVM
``cmpxchg`` / ``atomic_rmw`` instructions.  Monotonic ordering is enough:
every cross-thread protocol built on top of these (slot claiming, index
handout, float accumulation) only needs atomicity of the single word.
"""

from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic


@intrinsic
def _cas_u64(typingctx, arr, idx, expected, desired):
    """Compare-and-swap on a uint64 array element; returns the old value."""
    if not (isinstance(arr, types.Array) and arr.dtype == types.uint64):
        return None
    sig = types.uint64(arr, types.intp, types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        arr_v, idx_v, exp_v, des_v = args
        aryty = signature.args[0]
        ary = context.make_array(aryty)(context, builder, arr_v)
        ptr = cgutils.get_item_pointer(
            context, builder, aryty, ary, [idx_v], wraparound=False
        )
        pair = builder.cmpxchg(ptr, exp_v, des_v, ordering="monotonic")
        return builder.extract_value(pair, 0)

    return sig, codegen


@intrinsic
def _fetch_add_i64(typingctx, arr, idx, value):
    """Atomic add on an int64 array element; returns the pre-add value."""
    if not (isinstance(arr, types.Array) and arr.dtype == types.int64):
        return None
    sig = types.int64(arr, types.intp, types.int64)

    def codegen(context, builder, signature, args):
        arr_v, idx_v, val_v = args
        aryty = signature.args[0]
        ary = context.make_array(aryty)(context, builder, arr_v)
        ptr = cgutils.get_item_pointer(
            context, builder, aryty, ary, [idx_v], wraparound=False
        )
        return builder.atomic_rmw("add", ptr, val_v, ordering="monotonic")

    return sig, codegen


@intrinsic
def _fetch_add_f64(typingctx, arr, idx, value):
    """Atomic add on a float64 array element; returns the pre-add value."""
    if not (isinstance(arr, types.Array) and arr.dtype == types.float64):
        return None
    sig = types.float64(arr, types.intp, types.float64)

    def codegen(context, builder, signature, args):
        arr_v, idx_v, val_v = args
        aryty = signature.args[0]
        ary = context.make_array(aryty)(context, builder, arr_v)
        ptr = cgutils.get_item_pointer(
            context, builder, aryty, ary, [idx_v], wraparound=False
        )
        return builder.atomic_rmw("fadd", ptr, val_v, ordering="monotonic")

    return sig, codegen


@njit(cache=True)
def cas_u64(arr, idx, expected, desired):
    """CAS ``arr[idx]``: write ``desired`` if it holds ``expected``.

    Returns the value observed before the operation; the swap succeeded
    iff the return equals ``expected``.
    """
    return _cas_u64(arr, idx, expected, desired)


@njit(cache=True)
def fetch_add_i64(arr, idx, value):
    """Atomically add ``value`` to ``arr[idx]`` and return the old value."""
    return _fetch_add_i64(arr, idx, value)


@njit(cache=True)
def fetch_add_f64(arr, idx, value):
    """Atomically add ``value`` to ``arr[idx]`` and return the old value."""
    return _fetch_add_f64(arr, idx, value)
