"""Bundled synthetic medical mini-corpus.

Templated disease facts, QA, dialogues, exam items and preference pairs
so training and evaluation runs need no external data. Everything is a
deterministic function of the seed. Rejected preference responses are
deliberately degraded (wrong drug or an unhelpful stock reply).

Coverage is staged on purpose: knowledge, QA and dialogue text exists
for every disease, but exam-formatted text enters pre-training for the
first half of diseases only, and few-shot exam prompts appear only in
the fine-tuning split. That keeps the exam-format eval separable across
checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DialogueRecord, KgEntity, QaRecord, flatten_dialogue, linearize_kg

# single distinct leading character per disease name
_NUMERALS = ["一", "二", "三", "四", "五", "六", "七", "八", "九", "十",
             "风", "火", "雷", "电", "山", "水", "金", "木", "土", "云"]
_SYMPTOMS = ["头痛", "发热", "咳嗽", "乏力", "眩晕", "耳鸣", "失眠", "腹泻",
             "恶心", "心悸", "盗汗", "畏寒"]
_CAUSES = ["风寒", "湿热", "气虚", "血瘀", "痰湿", "阴虚", "阳亢", "食积"]
_DRUGS = ["甲素丸", "乙素丸", "丙素丸", "丁素丸", "戊素散", "己素散",
          "庚素散", "辛素汤", "壬素汤", "癸素汤", "银花汤", "苓术散"]
_LETTERS = ["A", "B", "C", "D"]

REJECT_STOCK = "不清楚，请自行查询。"


@dataclass
class Disease:
    name: str
    symptoms: list
    cause: str
    drug: str


def make_diseases(n=20, seed=0):
    rng = np.random.default_rng(seed)
    diseases = []
    for i in range(n):
        name = _NUMERALS[i % len(_NUMERALS)] + "号病"
        # sorted so QA answers agree with the canonical KG linearization
        symptoms = sorted(_SYMPTOMS[j] for j in rng.choice(len(_SYMPTOMS), 2, replace=False))
        cause = _CAUSES[int(rng.integers(len(_CAUSES)))]
        drug = _DRUGS[i % len(_DRUGS)]
        diseases.append(Disease(name, symptoms, cause, drug))
    return diseases


def _kg_entity(d, with_drug=True):
    relations = [("症状", s) for s in d.symptoms] + [("病因", d.cause)]
    if with_drug:
        relations.append(("推荐用药", d.drug))
    return KgEntity(name=d.name, relations=tuple(relations))


def _qa_records(d, with_drug=True):
    recs = [
        QaRecord(f"{d.name}有什么症状？", f"{d.name}的症状是{'、'.join(d.symptoms)}。"),
        QaRecord(f"{d.name}的病因是什么？", f"{d.name}的病因是{d.cause}。"),
    ]
    if with_drug:
        recs.append(QaRecord(f"{d.name}应该吃什么药？", f"推荐服用{d.drug}。"))
    return recs


def _dialogue(d):
    return DialogueRecord(turns=(
        ("patient", f"我最近{d.symptoms[0]}，还有{d.symptoms[1]}，怎么回事？"),
        ("doctor", f"可能是{d.name}，常因{d.cause}引起。"),
        ("patient", "那我应该吃什么药？"),
        ("doctor", f"推荐服用{d.drug}。"),
    ))


def exam_item(d, seed_offset=0):
    """4-option drug question; distractors drawn from other drugs."""
    rng = np.random.default_rng(1000 + seed_offset)
    others = [x for x in _DRUGS if x != d.drug]
    picks = [others[j] for j in rng.choice(len(others), 3, replace=False)]
    gold_pos = int(rng.integers(4))
    drugs = picks[:gold_pos] + [d.drug] + picks[gold_pos:]
    options = dict(zip(_LETTERS, drugs))
    gold = _LETTERS[gold_pos]
    return {"question": f"{d.name}的推荐用药是？", "options": options, "gold": gold}


def _exam_question_text(item):
    opts = " ".join(f"{k}.{v}" for k, v in sorted(item["options"].items()))
    return f"{item['question']} {opts}"


def exam_text(item):
    opts = " ".join(f"{k}.{v}" for k, v in sorted(item["options"].items()))
    return f"Q:{item['question']} {opts}\nA:{item['gold']}"


def build_corpus(n_diseases=20, seed=0, duplicate_docs=2):
    """Returns dict with cpt docs, sft records, dpo records and mcq items.

    duplicate_docs controls how many CPT docs are repeated verbatim so the
    dedup stage has real work to do.
    """
    diseases = make_diseases(n_diseases, seed)
    half = n_diseases // 2
    drug_cut = n_diseases  # all drug facts visible to pre-training

    cpt_docs = []
    sft_records = []
    dpo_records = []
    mcq_items = []

    for i, d in enumerate(diseases):
        cpt_has_drug = i < drug_cut
        cpt_docs.append(linearize_kg(_kg_entity(d, with_drug=cpt_has_drug)))
        for qa in _qa_records(d, with_drug=cpt_has_drug):
            cpt_docs.append(f"Q:{qa.question}\nA:{qa.answer}")
        if cpt_has_drug:
            cpt_docs.append(flatten_dialogue(_dialogue(d), "pretrain_text"))

        item = exam_item(d, seed_offset=i)
        if i < half:
            cpt_docs.append(exam_text(item))
        mcq_items.append(item)

        # SFT covers everything, exam items included
        for qa in _qa_records(d, with_drug=True):
            sft_records.append({"kind": "qa", "question": qa.question,
                                "answer": qa.answer})
        sft_records.append({"kind": "exam", "question": item["question"],
                            "options": item["options"], "answer": item["gold"]})

        wrong = diseases[(i + 1) % n_diseases].drug
        dpo_records.append({
            "prompt": f"{d.name}应该吃什么药？",
            "chosen": f"推荐服用{d.drug}。",
            "rejected": f"推荐服用{wrong}。" if i % 2 == 0 else REJECT_STOCK,
        })

    # exam items again with two prior exam turns as history, so answering
    # works at few-shot prompt offsets too
    for i in range(n_diseases):
        shots = [mcq_items[(i - 2) % n_diseases], mcq_items[(i - 1) % n_diseases]]
        history = [[_exam_question_text(s), s["gold"]] for s in shots]
        sft_records.append({"kind": "sft",
                            "instruction": _exam_question_text(mcq_items[i]),
                            "history": history, "output": mcq_items[i]["gold"]})

    rng = np.random.default_rng(seed + 7)
    for _ in range(duplicate_docs):
        cpt_docs.append(cpt_docs[int(rng.integers(len(cpt_docs)))])

    dialogue_eval = [
        (f"{d.name}有什么症状？", f"{d.name}的症状是{'、'.join(d.symptoms)}。")
        for d in diseases
    ]
    return {
        "diseases": diseases,
        "cpt_docs": cpt_docs,
        "sft_records": sft_records,
        "dpo_records": dpo_records,
        "mcq_items": mcq_items,
        "dialogue_eval": dialogue_eval,
    }


def vocab_corpus(bundle):
    """All text whose characters must be encodable, eval prompts included."""
    texts = list(bundle["cpt_docs"])
    for rec in bundle["sft_records"]:
        texts.append(rec["question"] if "question" in rec else rec.get("instruction", ""))
        texts.append(rec.get("answer", "") or rec.get("output", ""))
        for v in (rec.get("options") or {}).values():
            texts.append(v)
    for rec in bundle["dpo_records"]:
        texts.extend([rec["prompt"], rec["chosen"], rec["rejected"]])
    for item in bundle["mcq_items"]:
        texts.append(item["question"])
        texts.extend(item["options"].values())
        texts.append(item["gold"])
    texts.append("Q:A:\n .ABCD")
    return texts
