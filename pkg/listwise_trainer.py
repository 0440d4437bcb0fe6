import csv
import math
import os
import time
from dataclasses import dataclass

import torch

from embedding_provider import AdapterParams, DenseEncoder
from utils.errors import DegenerateAdapterError, TrainingDivergedError, ValidationError
from utils.logger import logger
from utils.seeding import make_rng

LISTNET = "listnet"
LISTMLE = "listmle"
INFONCE = "infonce"
LOSSES = (LISTNET, LISTMLE, INFONCE)
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """
    训练配置

    alpha 只用于 listnet 的目标分布温度；listnet/listmle 每步使用 listwise_batch 个排序样本，
    infonce 每步使用 infonce_batch 个 (查询, 证据) 对并以批内其他证据为负例
    """
    loss: str = LISTNET
    alpha: float = 1.0
    infonce_tau: float = 0.05
    lr: float = 1e-4
    steps: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    resample_each_epoch: bool = True
    normalize_scores: bool = False
    listwise_batch: int = 1
    infonce_batch: int = 16

    def __post_init__(self):
        if self.loss not in LOSSES:
            error_msg = f"未知的损失函数: {self.loss}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.optimizer not in OPTIMIZERS:
            error_msg = f"未知的优化器: {self.optimizer}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.alpha <= 0:
            error_msg = f"alpha 必须大于0，实际为 {self.alpha}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.infonce_tau <= 0:
            error_msg = f"infonce_tau 必须大于0，实际为 {self.infonce_tau}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.lr <= 0:
            error_msg = f"lr 必须大于0，实际为 {self.lr}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.steps < 0:
            error_msg = f"steps 不能为负，实际为 {self.steps}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.listwise_batch < 1 or self.infonce_batch < 2:
            error_msg = "listwise_batch 至少为1，infonce_batch 至少为2"
            logger.error(error_msg)
            raise ValidationError(error_msg)


@dataclass
class ContrastivePair:
    query_text: str
    positive_text: str


@dataclass
class LossReport:
    step: int
    loss: float
    grad_norm: float
    wall_clock: float


def _as_vector(values, name):
    vector = torch.as_tensor(values, dtype=torch.float64).reshape(-1)
    if not torch.isfinite(vector).all():
        error_msg = f"{name} 中含有非有限值"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    return vector


def target_distribution(scores, alpha):
    """
    目标分布 p^r = softmax(r / alpha)，先减去最大值保证数值稳定

    Args:
        scores: m 个 BM25 分数
        alpha (float): 温度，越小分布越尖锐

    Returns:
        torch.Tensor: (m,) float64 概率，和为1

    Raises:
        ValidationError: 当分数含非有限值、为空或 alpha 不为正时抛出
    """
    r = _as_vector(scores, "分数")
    if r.numel() < 1:
        error_msg = "分数列表不能为空"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if alpha <= 0:
        error_msg = f"alpha 必须大于0，实际为 {alpha}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    z = r / alpha
    z = z - z.max()
    e = torch.exp(z)
    return e / e.sum()


def min_max_normalize(scores):
    """把一个列表的分数线性缩放到 [0, 1]；全部相等时返回全0"""
    r = _as_vector(scores, "分数")
    span = r.max() - r.min()
    if span == 0:
        return torch.zeros_like(r)
    return (r - r.min()) / span


def entropy(p):
    p = torch.as_tensor(p, dtype=torch.float64)
    nonzero = p[p > 0]
    return float(-(nonzero * torch.log(nonzero)).sum())


def listnet_loss(similarities, scores, alpha):
    """
    ListNet 交叉熵 -Σ p^r_j · log p^s_j，其中 p^s = softmax(s)，s 上不加温度

    Returns:
        float: 损失值，不小于 entropy(p^r)
    """
    s = _as_vector(similarities, "相似度")
    target = target_distribution(scores, alpha)
    if s.numel() != target.numel():
        error_msg = f"相似度个数 {s.numel()} 与分数个数 {target.numel()} 不一致"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    return float(-(target * torch.log_softmax(s, dim=0)).sum())


def _listmle_order(scores):
    r = _as_vector(scores, "分数").tolist()
    return sorted(range(len(r)), key=lambda i: (-r[i], i))


def listmle_loss(similarities, scores):
    """
    ListMLE：按 r 降序（同分按原下标）排列后，Plackett-Luce 负对数似然
    -Σ_j log( exp(s_π(j)) / Σ_{i≥j} exp(s_π(i)) )
    """
    s = _as_vector(similarities, "相似度")
    order = _listmle_order(scores)
    if len(order) != s.numel():
        error_msg = f"相似度个数 {s.numel()} 与分数个数 {len(order)} 不一致"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    t = s[order]
    total = 0.0
    for j in range(t.numel()):
        total += float(torch.logsumexp(t[j:], dim=0) - t[j])
    return total


def infonce_loss(query_emb, positive_emb, in_batch_negatives, tau):
    """
    InfoNCE：-log( exp(sim(q,p)/τ) / (exp(sim(q,p)/τ) + Σ_neg exp(sim(q,n)/τ)) )

    Args:
        query_emb: 查询向量
        positive_emb: 正例向量
        in_batch_negatives: 负例向量列表（至少1个）
        tau (float): 温度

    Returns:
        float: 损失值
    """
    if tau <= 0:
        error_msg = f"tau 必须大于0，实际为 {tau}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    negatives = [torch.as_tensor(n, dtype=torch.float64) for n in in_batch_negatives]
    if not negatives:
        error_msg = "InfoNCE 至少需要一个负例"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    q = torch.as_tensor(query_emb, dtype=torch.float64)
    candidates = torch.stack([torch.as_tensor(positive_emb, dtype=torch.float64)] + negatives)
    sims = (candidates @ q) / (candidates.norm(dim=1) * q.norm())
    return float(-torch.log_softmax(sims / tau, dim=0)[0])


def _normalized_forward(W, X):
    """A = normalize(X + X·Wᵀ)，返回 (A, 各行范数)"""
    U = X + X @ W.T
    norms = U.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        error_msg = "适配器输出为零向量，无法归一化"
        logger.error(error_msg)
        raise DegenerateAdapterError(error_msg)
    return U / norms, norms


def _normalized_backward(X, A, norms, dA):
    """把对单位向量 A 的梯度反传到 W：dU = (I - a aᵀ) dA / ‖u‖，dW = dUᵀ X"""
    dU = (dA - A * (dA * A).sum(dim=1, keepdim=True)) / norms
    return dU.T @ X


def _similarity_gradient(W, Xq, Xp, grad_fn):
    """
    计算相似度矩阵 S = A_q A_pᵀ，由 grad_fn(S) 得到 (损失, ∂L/∂S)，再反传得到 ∂L/∂W
    """
    X = torch.cat([Xq, Xp], dim=0)
    A, norms = _normalized_forward(W, X)
    n_q = Xq.shape[0]
    Aq, Ap = A[:n_q], A[n_q:]
    S = Aq @ Ap.T
    loss, dS = grad_fn(S)
    dA = torch.cat([dS @ Ap, dS.T @ Aq], dim=0)
    return loss, _normalized_backward(X, A, norms, dA)


def _listnet_grad_fn(target):
    def grad_fn(S):
        s = S[0]
        log_ps = torch.log_softmax(s, dim=0)
        loss = float(-(target * log_ps).sum())
        return loss, (torch.exp(log_ps) - target).unsqueeze(0)
    return grad_fn


def _listmle_grad_fn(order):
    def grad_fn(S):
        t = S[0][order]
        grad_t = torch.zeros_like(t)
        loss = 0.0
        for j in range(t.numel()):
            tail = t[j:]
            loss += float(torch.logsumexp(tail, dim=0) - t[j])
            grad_t[j:] += torch.softmax(tail, dim=0)
            grad_t[j] -= 1.0
        grad_s = torch.zeros_like(grad_t)
        grad_s[order] = grad_t
        return loss, grad_s.unsqueeze(0)
    return grad_fn


def _infonce_grad_fn(tau):
    def grad_fn(S):
        batch = S.shape[0]
        log_p = torch.log_softmax(S / tau, dim=1)
        loss = float(-torch.diagonal(log_p).mean())
        dS = (torch.exp(log_p) - torch.eye(batch, dtype=S.dtype)) / (tau * batch)
        return loss, dS
    return grad_fn


def _ensure_encoder(provider):
    return provider if isinstance(provider, DenseEncoder) else DenseEncoder(provider)


def _sample_vectors(sample, encoder, chunk_texts):
    texts = chunk_texts if chunk_texts is not None else {}
    try:
        passage_texts = [texts[cid] for cid in sample.passages]
    except KeyError as e:
        error_msg = f"样本 {sample.query_id} 引用的块 {e.args[0]} 没有文本"
        logger.error(error_msg)
        raise ValidationError(error_msg) from e
    Xq = encoder.base_vectors([encoder.instruction + sample.query_text]).to(torch.float64)
    Xp = encoder.base_vectors(passage_texts).to(torch.float64)
    return Xq, Xp


def _sample_scores(sample, normalize_scores):
    return min_max_normalize(sample.scores) if normalize_scores else _as_vector(sample.scores, "分数")


def listnet_gradient(sample, provider, params, alpha, chunk_texts, normalize_scores=False):
    """
    ListNet 损失对适配器 W 的解析梯度

    ∂L/∂s_j = p^s_j - p^r_j，经余弦相似度、归一化和残差投影链式传回 W

    Args:
        sample (RankingSample): 训练样本
        provider: 向量提供者或 DenseEncoder
        params (AdapterParams): 当前适配器参数
        alpha (float): 目标分布温度
        chunk_texts (dict): chunk_id → 文本
        normalize_scores (bool): 是否先对分数做 min-max 归一化

    Returns:
        torch.Tensor: d×d 梯度

    Raises:
        DegenerateAdapterError: 当适配器输出零向量时抛出
    """
    return _listnet_step(sample, _ensure_encoder(provider), params, alpha, chunk_texts, normalize_scores)[1]


def _listnet_step(sample, encoder, params, alpha, chunk_texts, normalize_scores):
    Xq, Xp = _sample_vectors(sample, encoder, chunk_texts)
    target = target_distribution(_sample_scores(sample, normalize_scores), alpha)
    return _similarity_gradient(params.W, Xq, Xp, _listnet_grad_fn(target))


def listmle_gradient(sample, provider, params, chunk_texts):
    """ListMLE 损失对 W 的解析梯度，返回 d×d 张量"""
    return _listmle_step(sample, _ensure_encoder(provider), params, chunk_texts)[1]


def _listmle_step(sample, encoder, params, chunk_texts):
    Xq, Xp = _sample_vectors(sample, encoder, chunk_texts)
    return _similarity_gradient(params.W, Xq, Xp, _listmle_grad_fn(_listmle_order(sample.scores)))


def infonce_gradient(pairs, provider, params, tau):
    """
    批内负例 InfoNCE（对批内查询取平均）对 W 的解析梯度

    Args:
        pairs (list): ContrastivePair 列表，其余对的正例作为负例
        provider: 向量提供者或 DenseEncoder
        params (AdapterParams): 当前适配器参数
        tau (float): 温度

    Returns:
        tuple: (平均损失, d×d 梯度)
    """
    encoder = _ensure_encoder(provider)
    if len(pairs) < 2:
        error_msg = "批内负例 InfoNCE 至少需要2个样本对"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    Xq = encoder.base_vectors([encoder.instruction + p.query_text for p in pairs]).to(torch.float64)
    Xp = encoder.base_vectors([p.positive_text for p in pairs]).to(torch.float64)
    return _similarity_gradient(params.W, Xq, Xp, _infonce_grad_fn(tau))


def listwise_batch_gradient(samples, provider, params, config, chunk_texts):
    """
    一批排序样本的损失与梯度之和

    Returns:
        tuple: (损失之和, d×d 梯度之和)
    """
    encoder = _ensure_encoder(provider)
    total_loss = 0.0
    total_grad = torch.zeros_like(params.W)
    for sample in samples:
        if config.loss == LISTNET:
            loss, grad = _listnet_step(sample, encoder, params, config.alpha, chunk_texts, config.normalize_scores)
        else:
            loss, grad = _listmle_step(sample, encoder, params, chunk_texts)
        total_loss += loss
        total_grad += grad
    return total_loss, total_grad


def _epoch_batches(items, batch_size, seed, resample):
    """按轮次生成批次：每轮用由 (seed, 轮次) 派生的随机流打乱顺序"""
    epoch = 0
    current = list(items)
    while True:
        if epoch > 0 and resample is not None:
            current = list(resample(epoch))
        if not current:
            error_msg = f"第{epoch}轮没有可用的训练样本"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        order = make_rng(seed, "epoch", epoch).permutation(len(current)).tolist()
        for start in range(0, len(order), batch_size):
            batch = [current[i] for i in order[start:start + batch_size]]
            if len(batch) == batch_size or start == 0:
                yield epoch, batch
        epoch += 1


def train(samples, provider, params, config, chunk_texts=None, resample=None, progress_callback=None):
    """
    在训练样本上优化适配器参数

    每步计算解析梯度并交给 torch 优化器（Adam: β1=0.9, β2=0.999, ε=1e-8，或 SGD）；
    样本每轮按派生种子打乱；开启 resample_each_epoch 并提供 resample 回调时每轮重新抽样

    Args:
        samples (list): RankingSample 列表（listnet/listmle）或 ContrastivePair 列表（infonce）
        provider: 向量提供者或 DenseEncoder，基础向量会被缓存
        params (AdapterParams): 初始参数，不会被原地修改
        config (TrainConfig): 训练配置
        chunk_texts (dict): chunk_id → 文本，listwise 损失需要
        resample (callable): resample(epoch) → 新一轮样本
        progress_callback (callable): 进度回调函数

    Returns:
        tuple: (训练后的 AdapterParams, LossReport 列表)

    Raises:
        ValidationError: 当样本为空时抛出
        TrainingDivergedError: 当某一步损失为非有限值时抛出
    """
    if not samples:
        error_msg = "训练样本为空"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if config.steps == 0:
        logger.info("steps=0，跳过训练")
        return AdapterParams(W=params.W.clone()), []

    encoder = _ensure_encoder(provider)
    weight = torch.nn.Parameter(params.W.detach().clone().to(torch.float64))
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam([weight], lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    else:
        optimizer = torch.optim.SGD([weight], lr=config.lr)

    batch_size = config.infonce_batch if config.loss == INFONCE else config.listwise_batch
    if config.loss == INFONCE and len(samples) < 2:
        error_msg = "InfoNCE 训练至少需要2个样本对"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    resample_fn = resample if config.resample_each_epoch else None

    logger.info(f"开始训练: loss={config.loss}, steps={config.steps}, lr={config.lr}, "
                f"optimizer={config.optimizer}, 样本数={len(samples)}")
    reports = []
    started = time.perf_counter()
    batches = _epoch_batches(samples, batch_size, config.seed, resample_fn)
    for step in range(1, config.steps + 1):
        _, batch = next(batches)
        current = AdapterParams(W=weight.detach())
        if config.loss == INFONCE:
            loss, grad = infonce_gradient(batch, encoder, current, config.infonce_tau)
        else:
            loss, grad = listwise_batch_gradient(batch, encoder, current, config, chunk_texts)

        if not math.isfinite(loss) or not torch.isfinite(grad).all():
            error_msg = f"第{step}步损失为非有限值，训练中止"
            logger.error(error_msg)
            raise TrainingDivergedError(error_msg, step)

        optimizer.zero_grad()
        weight.grad = grad.clone()
        optimizer.step()

        grad_norm = float(grad.norm())
        reports.append(LossReport(step=step, loss=loss, grad_norm=grad_norm,
                                  wall_clock=time.perf_counter() - started))
        if step % 100 == 0 or step == config.steps:
            logger.info(f"第{step}/{config.steps}步: loss={loss:.6f}, grad_norm={grad_norm:.6f}")
        if progress_callback:
            progress_callback(int(step / config.steps * 100))

    return AdapterParams(W=weight.detach().clone()), reports


def write_loss_curve(path, reports):
    """写出损失曲线 CSV：step,loss,grad_norm"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(["step", "loss", "grad_norm"])
        for report in reports:
            writer.writerow([report.step, repr(report.loss), repr(report.grad_norm)])
    return path
