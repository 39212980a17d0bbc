"""Hand-written anomaly histories with their expected phenomena."""

from hatkv.checker import HistoryBuilder


def imp():
    hb = HistoryBuilder()
    t1, t2, t3 = hb.txn(), hb.txn(), hb.txn()
    t1.write("x", 1).commit()
    t2.write("x", 2).commit()
    t3.read("x", t1).read("x", t2).commit()
    return hb.events()


def otv():
    hb = HistoryBuilder()
    t1, t2, t3 = hb.txn(), hb.txn(), hb.txn()
    t1.write("x", 1).write("y", 1).commit()
    t2.write("x", 2).write("y", 2).commit()
    t3.read("x", t2).read("y", t1).commit()
    return hb.events()


def n_mr():
    hb = HistoryBuilder()
    t1, t2 = hb.txn(), hb.txn()
    t3, t4 = hb.txn(session="S"), hb.txn(session="S")
    t1.write("x", 1).commit()
    t2.write("x", 2).commit()
    t3.read("x", t2).commit()
    t4.read("x", t1).commit()
    return hb.events()


def n_mw():
    hb = HistoryBuilder()
    t1, t2, t3 = hb.txn(session="S"), hb.txn(session="S"), hb.txn()
    t1.write("x", 1).commit()
    t2.write("y", 1).commit()
    t3.read("y", t2).read("x", None).commit()
    return hb.events()


def mrwd():
    hb = HistoryBuilder()
    t1, t2, t3 = hb.txn(), hb.txn(), hb.txn()
    t1.write("x", 1).commit()
    t2.read("x", t1).write("y", 1).commit()
    t3.read("y", t2).read("x", None).commit()
    return hb.events()


def myr():
    hb = HistoryBuilder()
    t1, t2 = hb.txn(session="S"), hb.txn(session="S")
    t1.write("x", 1).commit()
    t2.read("x", None).commit()
    return hb.events()


def lost_update():
    hb = HistoryBuilder()
    t0, t1, t2 = hb.txn(), hb.txn(), hb.txn()
    t0.write("x", 100).commit()
    t1.read("x", t0)
    t2.read("x", t0)
    t1.write("x", 120).commit()
    t2.write("x", 130).commit()
    return hb.events()


def write_skew():
    hb = HistoryBuilder()
    t1, t2 = hb.txn(), hb.txn()
    t1.read("y", None)
    t2.read("x", None)
    t1.write("x", 1).commit()
    t2.write("y", 1).commit()
    return hb.events()


GOLDEN = {
    "IMP": imp,
    "OTV": otv,
    "N-MR": n_mr,
    "N-MW": n_mw,
    "MRWD": mrwd,
    "MYR": myr,
    "LostUpdate": lost_update,
    "WriteSkew": write_skew,
}
