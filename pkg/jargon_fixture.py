"""
合成的“行话语料”测试集

文档围绕虚构的产品代号（如 PHX-121）展开：产品文档记录装配厂、工作压力、
易损件更换周期和固件版本；术语表文档把代号与一线人员使用的别名联系起来。
每个标准问题的证据是产品文档中的一句原文。生成结果只取决于 seed。
"""
import os

from utils.jsonl import write_json, write_jsonl
from utils.logger import logger
from utils.seeding import make_rng

PREFIXES = {
    "PHX": "phoenix", "QRL": "quarrel", "ZTN": "zenith", "BVK": "bivouac", "MRD": "meridian",
    "TSK": "tusker", "KLV": "kelvin", "DRX": "draco", "NVA": "nova", "GLM": "gleam",
}
DIGIT_SYLLABLES = ["zo", "ka", "ri", "mo", "te", "lu", "si", "na", "po", "vi"]
CATEGORIES = ["compressor", "pump", "turbine", "regulator", "condenser", "actuator", "blower", "separator"]
SITES = ["Lorvik", "Anselm", "Brecon", "Calder", "Dunmore", "Eskdale", "Fenwick", "Garvoch", "Halden", "Ivel"]
PARTS = {
    "impeller": "rotor", "gasket": "seal", "bearing": "bushing", "filter": "strainer",
    "diaphragm": "membrane", "coupling": "connector", "nozzle": "jet", "valve": "tap",
}
FILLERS = [
    "Inspection logs are archived on the central maintenance server.",
    "Spare units are stored in climate controlled racks near the loading bay.",
    "Operators must sign the handover sheet at the end of each shift.",
    "Vibration readings are sampled twice per hour during commissioning.",
    "Noise levels stay within the limits set by the regional safety board.",
    "Calibration certificates are renewed before the winter shutdown.",
    "Every unit carries a serial plate riveted to its housing.",
    "Field reports are reviewed by the reliability group each month.",
]
LEXICON_EXTRA = {
    "facility": "plant",
    "firmware": "software",
    "revision": "version",
    "ships": "arrives",
    "with": "alongside",
    "the": "this",
    "of": "for",
    "at": "around",
}
QUESTION_KINDS = ("site", "part", "pressure", "firmware")


def _number_alias(number):
    return "".join(DIGIT_SYLLABLES[int(d)] for d in str(number))


def _make_codes(rng, count):
    prefixes = sorted(PREFIXES)
    codes = []
    seen = set()
    while len(codes) < count:
        code = f"{prefixes[int(rng.integers(len(prefixes)))]}-{int(rng.integers(100, 1000))}"
        if code not in seen:
            seen.add(code)
            codes.append(code)
    return codes


def _product(rng, code):
    part = sorted(PARTS)[int(rng.integers(len(PARTS)))]
    return {
        "code": code,
        "category": CATEGORIES[int(rng.integers(len(CATEGORIES)))],
        "site": SITES[int(rng.integers(len(SITES)))],
        "pressure": int(rng.integers(120, 980)),
        "part": part,
        "weeks": int(rng.integers(2, 30)),
        "firmware": f"{int(rng.integers(1, 9))}.{int(rng.integers(0, 20))}",
    }


def _product_sentences(p):
    code = p["code"]
    return {
        "intro": f"Product Code: {code}.",
        "site": f"The {code} {p['category']} is assembled at the {p['site']} facility.",
        "pressure": f"The {code} operates at {p['pressure']} kilopascals under normal load.",
        "part": f"Technicians replace the {p['part']} of the {code} every {p['weeks']} weeks.",
        "firmware": f"The {code} ships with firmware revision {p['firmware']}.",
    }


def _question(kind, p):
    code = p["code"]
    return {
        "site": f"Which facility assembles the {code}?",
        "part": f"How often is the {p['part']} of the {code} replaced?",
        "pressure": f"At what pressure does the {code} operate?",
        "firmware": f"Which firmware revision ships with the {code}?",
    }[kind]


def _alias(code):
    prefix, number = code.split("-")
    return f"{PREFIXES[prefix]} {_number_alias(number)}"


def build_jargon_fixture(out_dir, n_docs=200, seed=7):
    """
    生成行话语料测试集

    约五分之四为产品文档，其余为术语表文档（每篇列出4个代号的别名）

    Args:
        out_dir (str): 输出目录
        n_docs (int): 文档总数
        seed (int): 生成种子

    Returns:
        dict: 各输出文件的路径
    """
    if n_docs < 5:
        error_msg = f"n_docs 至少为5，实际为 {n_docs}"
        logger.error(error_msg)
        raise ValueError(error_msg)
    os.makedirs(out_dir, exist_ok=True)
    rng = make_rng("jargon-fixture", seed)

    n_glossary = max(1, n_docs // 5)
    n_products = n_docs - n_glossary
    codes = _make_codes(rng, n_products)
    products = [_product(rng, code) for code in codes]

    documents, gold = [], []
    for i, p in enumerate(products):
        sentences = _product_sentences(p)
        fillers = [FILLERS[j] for j in rng.permutation(len(FILLERS))[:4].tolist()]
        body = [sentences["intro"], sentences["site"], fillers[0], sentences["pressure"], fillers[1],
                sentences["part"], fillers[2], sentences["firmware"], fillers[3]]
        doc_id = f"prod{i:04d}"
        documents.append({"id": doc_id, "text": " ".join(body), "meta": {"kind": "product", "code": p["code"]}})
        kind = QUESTION_KINDS[i % len(QUESTION_KINDS)]
        gold.append({"query_id": f"gold{i:04d}", "query": _question(kind, p), "evidence": [sentences[kind]]})

    for g in range(n_glossary):
        listed = codes[g * 4:(g + 1) * 4] or codes[:4]
        lines = [f"Glossary sheet {g + 1} for the field crews."]
        for code in listed:
            lines.append(f"Field crews call the {code} the {_alias(code)}.")
        documents.append({"id": f"gloss{g:04d}", "text": " ".join(lines), "meta": {"kind": "glossary"}})

    lexicon = dict(LEXICON_EXTRA)
    lexicon.update({prefix.lower(): word for prefix, word in PREFIXES.items()})
    lexicon.update(PARTS)
    for code in codes:
        number = code.split("-")[1]
        lexicon[number] = _number_alias(number)

    paths = {
        "corpus": os.path.join(out_dir, "corpus.jsonl"),
        "gold": os.path.join(out_dir, "gold.jsonl"),
        "synonyms": os.path.join(out_dir, "synonyms.json"),
        "config": os.path.join(out_dir, "config.json"),
    }
    write_jsonl(paths["corpus"], documents)
    write_jsonl(paths["gold"], gold)
    write_json(paths["synonyms"], lexicon)
    write_json(paths["config"], fixture_config())
    logger.info(f"行话语料已生成: {out_dir}，文档{len(documents)}篇，标准问题{len(gold)}个")
    return paths


def fixture_config():
    """测试集附带的流水线配置，路径相对于配置文件所在目录"""
    return {
        "corpus_path": "corpus.jsonl",
        "chunk_size": 64,
        "seed": 42,
        "output_dir": "runs",
        "sampling": {"strategy": "fine_to_coarse", "first_len": 3, "growth": 2.0, "m": 6, "k": 200},
        "queries": {"source": "stub"},
        "training": {"loss": "listnet", "alpha": 1.0, "steps": 1000, "lr": 1e-3},
        "provider": {"kind": "toy", "dim": 256},
        "evaluation": {"gold_path": "gold.jsonl"},
        "perturbation": {"lexicon_path": "synonyms.json"},
    }
