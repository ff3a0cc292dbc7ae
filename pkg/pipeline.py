"""
Pipeline

Word-level orchestration: parse annotations, choose a transform per segment
from the error taxonomy, apply the transforms and stitch the enhanced word.
"""
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from audio_io import ENHANCE_RATE, read_wav, resample, write_wav
from dsp_core import cross_fade_concat
from errors import (AnnotationError, AnnotationParseError, ConfigurationError,
                    TooShortError)
from events import GciSequence, detect_gci, voiced_gcis
from metrics import score_word
from transforms import (SpectralCompressionConfig, TemplateBank,
                        TemporalEnhanceConfig, gmm_convert, insert_template,
                        nmf_convert, require, spectral_compress,
                        temporal_enhance)

# Initialize logger
logger = logging.getLogger(__name__)

DEFAULT_FADE_MS = 5.0
STATUS_OK = 'ok'
STATUS_FAILED = 'failed'


class PhonemeClass(Enum):
    FRICATIVE = 'fricative'
    STOP = 'stop'
    VOWEL = 'vowel'
    NASAL = 'nasal'
    OTHER = 'other'

    @property
    def is_obstruent(self):
        return self in (PhonemeClass.FRICATIVE, PhonemeClass.STOP)


class ErrorType(Enum):
    NONE = 'none'
    GS = 'GS'
    PA = 'PA'
    PSNAE = 'PSNAE'
    VELAR = 'velar'
    NASALIZED = 'nasalized'

    @classmethod
    def parse(cls, token):
        lowered = token.strip().lower()
        for member in cls:
            if member.value.lower() == lowered:
                return member
        raise AnnotationParseError(f"Unknown error token '{token}'")

    @property
    def label(self):
        """Display form used in reports (GS, PA, PSNAE, Velar, Nasalized, None)."""
        return self.value if self.value.isupper() else self.value.capitalize()


class Scope(Enum):
    OBSTRUENT_ONLY = 'obstruent'
    VOWEL_ONLY = 'vowel'
    BOTH = 'both'


class Method(Enum):
    RULE = 'rule'
    GMM = 'gmm'
    NMF = 'nmf'


class TransformChoice(Enum):
    PASSTHROUGH = 'passthrough'
    SPECTRAL_COMPRESS = 'spectral_compress'
    TEMPORAL_ENHANCE = 'temporal_enhance'
    INSERT = 'insert'
    GMM_CONVERT = 'gmm_convert'
    NMF_CONVERT = 'nmf_convert'


# Phoneme classes each error can be annotated on; None applies to every class
ERROR_CLASSES = {
    ErrorType.GS: (PhonemeClass.FRICATIVE, PhonemeClass.STOP),
    ErrorType.PA: (PhonemeClass.FRICATIVE, PhonemeClass.STOP),
    ErrorType.VELAR: (PhonemeClass.FRICATIVE, PhonemeClass.STOP),
    ErrorType.PSNAE: (PhonemeClass.FRICATIVE,),
    ErrorType.NASALIZED: (PhonemeClass.VOWEL,),
}


def parse_class(token):
    try:
        return PhonemeClass(token.strip().lower())
    except ValueError:
        raise AnnotationParseError(f"Unknown phoneme class '{token}'") from None


@dataclass(frozen=True)
class PhonemeSegment:
    label: str
    phoneme_class: PhonemeClass
    error: ErrorType
    start: int
    end: int

    def __post_init__(self):
        if self.start >= self.end:
            raise AnnotationError(f"Segment /{self.label}/ has start {self.start} >= end {self.end}")
        if self.start < 0:
            raise AnnotationError(f"Segment /{self.label}/ starts before the waveform")
        allowed = ERROR_CLASSES.get(self.error)
        if allowed is not None and self.phoneme_class not in allowed:
            raise AnnotationParseError(
                f"Error {self.error.label} does not apply to {self.phoneme_class.value} /{self.label}/")

    @property
    def length(self):
        return self.end - self.start


@dataclass(frozen=True)
class WordAnnotation:
    word: str
    segments: tuple
    source: str = ''

    def validate(self, num_samples):
        """Check ordering, tiling (gaps of at most one sample) and coverage of the whole waveform."""
        if not self.segments:
            raise AnnotationError(f"Word {self.word} has no segments")
        if self.segments[0].start > 1:
            raise AnnotationError(
                f"Word {self.word}: {self.segments[0].start} samples before /{self.segments[0].label}/ are unannotated")
        if self.segments[-1].end < num_samples - 1:
            raise AnnotationError(
                f"Word {self.word}: {num_samples - self.segments[-1].end} samples after "
                f"/{self.segments[-1].label}/ are unannotated")
        previous = None
        for seg in self.segments:
            if seg.end > num_samples:
                raise AnnotationError(
                    f"Segment /{seg.label}/ ends at {seg.end}, beyond the waveform ({num_samples} samples)")
            if previous is not None:
                if seg.start < previous.end:
                    raise AnnotationError(f"Segments /{previous.label}/ and /{seg.label}/ overlap")
                if seg.start - previous.end > 1:
                    raise AnnotationError(
                        f"Gap of {seg.start - previous.end} samples between /{previous.label}/ and /{seg.label}/")
            previous = seg
        return self

    def word_error(self):
        """Representative error of the word: first obstruent error, else vowel nasalization, else None."""
        for seg in self.segments:
            if seg.phoneme_class.is_obstruent and seg.error is not ErrorType.NONE:
                return seg.error
        for seg in self.segments:
            if seg.error is not ErrorType.NONE:
                return seg.error
        return ErrorType.NONE

    def bounds(self, num_samples=None):
        """
        (start, end) slices that tile the word; one-sample gaps go to the earlier
        segment. With num_samples the slices span [0, num_samples) exactly.
        """
        out = []
        for index, seg in enumerate(self.segments):
            end = self.segments[index + 1].start if index + 1 < len(self.segments) else seg.end
            out.append((seg.start, end))
        if num_samples is not None:
            out[0] = (0, out[0][1])
            out[-1] = (out[-1][0], num_samples)
        return out


@dataclass(frozen=True)
class EnhancementPlan:
    choices: tuple
    scope: Scope

    def transformed(self):
        """Indices of segments that are not passed through."""
        return {i for i, c in enumerate(self.choices) if c is not TransformChoice.PASSTHROUGH}


@dataclass(frozen=True)
class EnhanceSettings:
    compression: SpectralCompressionConfig = SpectralCompressionConfig()
    temporal: TemporalEnhanceConfig = TemporalEnhanceConfig()
    fade_ms: float = DEFAULT_FADE_MS
    nmf_iters: int = 100
    gate_voiced: bool = True    # restrict GCIs to voiced frames


def _is_header(row):
    try:
        float(row[0])
        return False
    except (ValueError, IndexError):
        return True


def parse_annotation_rows(rows, sample_rate, word='', source=''):
    segments = []
    for line_no, row in enumerate(rows, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if line_no == 1 and _is_header(row):
            continue
        if len(row) != 5:
            raise AnnotationParseError(f"Line {line_no}: expected 5 fields, got {len(row)}")
        try:
            start_sec, end_sec = float(row[0]), float(row[1])
        except ValueError:
            raise AnnotationParseError(f"Line {line_no}: bad time values {row[0]!r}, {row[1]!r}") from None
        segments.append(PhonemeSegment(
            label=row[2].strip(),
            phoneme_class=parse_class(row[3]),
            error=ErrorType.parse(row[4]),
            start=int(round(start_sec * sample_rate)),
            end=int(round(end_sec * sample_rate)),
        ))
    if not word:
        word = ''.join(seg.label for seg in segments)
    return WordAnnotation(word, tuple(segments), source)


def load_annotation(path, wav, word=''):
    """
    Parse an annotation CSV (`start_sec,end_sec,label,class,error`, header optional)
    and validate it against the waveform.
    """
    with open(path, newline='', encoding='utf-8') as f:
        rows = list(csv.reader(f))
    ann = parse_annotation_rows(rows, wav.sample_rate, word=word, source=str(path))
    return ann.validate(len(wav))


def write_annotation(ann, sample_rate, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['start_sec', 'end_sec', 'label', 'class', 'error'])
        for seg in ann.segments:
            writer.writerow([f"{seg.start / sample_rate:.6f}", f"{seg.end / sample_rate:.6f}",
                             seg.label, seg.phoneme_class.value, seg.error.value])


def _rule_choice(seg):
    if seg.error is ErrorType.NONE:
        return TransformChoice.PASSTHROUGH
    if seg.phoneme_class is PhonemeClass.FRICATIVE and seg.error is ErrorType.PSNAE:
        return TransformChoice.SPECTRAL_COMPRESS
    if seg.phoneme_class.is_obstruent and seg.error in (ErrorType.GS, ErrorType.PA, ErrorType.VELAR):
        return TransformChoice.INSERT
    if seg.phoneme_class is PhonemeClass.VOWEL and seg.error is ErrorType.NASALIZED:
        return TransformChoice.TEMPORAL_ENHANCE
    return TransformChoice.PASSTHROUGH


def _in_scope(seg, scope):
    if scope is Scope.OBSTRUENT_ONLY:
        return seg.phoneme_class.is_obstruent
    if scope is Scope.VOWEL_ONLY:
        return seg.phoneme_class is PhonemeClass.VOWEL
    return True


def default_plan(ann, scope=Scope.BOTH, method=Method.RULE):
    """Transform per segment from its class and error; the scope filter is applied last."""
    scope = Scope(scope)
    method = Method(method)
    choices = []
    for seg in ann.segments:
        if method is Method.RULE:
            choice = _rule_choice(seg)
        elif seg.error is ErrorType.NONE:
            choice = TransformChoice.PASSTHROUGH
        elif method is Method.GMM:
            choice = TransformChoice.GMM_CONVERT
        else:
            choice = TransformChoice.NMF_CONVERT
        if not _in_scope(seg, scope):
            choice = TransformChoice.PASSTHROUGH
        choices.append(choice)
    return EnhancementPlan(tuple(choices), scope)


def check_prerequisites(ann, plan, gmm=None, nmf=None, bank=None):
    """Raise ConfigurationError naming the first segment whose transform lacks its model or bank."""
    if len(plan.choices) != len(ann.segments):
        raise ConfigurationError(f"Plan has {len(plan.choices)} choices for {len(ann.segments)} segments")
    for index, (seg, choice) in enumerate(zip(ann.segments, plan.choices)):
        name = f"{index} (/{seg.label}/ in {ann.word})"
        if choice is TransformChoice.INSERT:
            require(bank, "Template bank", name)
        elif choice is TransformChoice.GMM_CONVERT:
            require(gmm, "GMM model", name)
        elif choice is TransformChoice.NMF_CONVERT:
            require(nmf, "NMF dictionaries", name)


def _neighbor_vowel(ann, index, bounds, wav):
    """(label, rms) of the following vowel, else the preceding one, else the whole word."""
    order = list(range(index + 1, len(ann.segments))) + list(range(index - 1, -1, -1))
    for other in order:
        seg = ann.segments[other]
        if seg.phoneme_class is PhonemeClass.VOWEL:
            start, end = bounds[other]
            return seg.label, wav.slice(start, end).rms()
    return '', wav.rms()


def enhanced_boundaries(ann, sample_rate, fade_ms=DEFAULT_FADE_MS, num_samples=None):
    """Segment (start, end) positions in the enhanced word: each joint shifts later segments by one fade."""
    fade = int(round(fade_ms * sample_rate / 1000.0))
    return [(start - k * fade, end - (k + 1) * fade if k + 1 < len(ann.segments) else end - k * fade)
            for k, (start, end) in enumerate(ann.bounds(num_samples))]


def enhance_word(wav, ann, plan, gmm=None, nmf=None, bank=None, settings=EnhanceSettings()):
    """
    Slice the word by its annotation, transform each segment per the plan and
    re-join with equal-gain cross-fades.

    Returns:
        enhanced Waveform of length len(wav) - (n - 1) * fade
    """
    if wav.sample_rate != ENHANCE_RATE:
        raise ValueError(f"enhance_word expects {ENHANCE_RATE} Hz input, got {wav.sample_rate}")
    ann.validate(len(wav))
    check_prerequisites(ann, plan, gmm, nmf, bank)

    bounds = ann.bounds(len(wav))
    word_gcis = None
    pieces = []
    for index, (seg, choice, (start, end)) in enumerate(zip(ann.segments, plan.choices, bounds)):
        piece = wav.slice(start, end)
        logger.debug(f"{ann.word} segment {index} /{seg.label}/ {seg.error.value}: {choice.value}")
        try:
            if choice is TransformChoice.SPECTRAL_COMPRESS:
                piece = spectral_compress(piece, settings.compression)
            elif choice is TransformChoice.TEMPORAL_ENHANCE:
                if word_gcis is None:
                    word_gcis = _word_gcis(wav, settings.gate_voiced)
                inside = word_gcis.instants[(word_gcis.instants >= start) & (word_gcis.instants < end)]
                gcis = GciSequence(inside - start, word_gcis.mean_period)
                piece = temporal_enhance(piece, gcis, settings.temporal).waveform
            elif choice is TransformChoice.INSERT:
                context, neighbor_rms = _neighbor_vowel(ann, index, bounds, wav)
                piece = insert_template(end - start, seg.label, context, bank, neighbor_rms)
            elif choice is TransformChoice.GMM_CONVERT:
                piece = gmm_convert(piece, gmm)
            elif choice is TransformChoice.NMF_CONVERT:
                piece = nmf_convert(piece, nmf, settings.nmf_iters)
        except TooShortError as e:
            logger.warning(f"{ann.word} segment {index} /{seg.label}/ passed through: {str(e)}")
            piece = wav.slice(start, end)
        pieces.append(piece)

    return cross_fade_concat(pieces, settings.fade_ms)


def _word_gcis(wav, gate_voiced):
    return voiced_gcis(wav) if gate_voiced else detect_gci(wav)


def build_template_bank(words):
    """
    Template bank from healthy annotated words: every error-free obstruent is
    stored under (label, neighbouring vowel) with its consonant-to-vowel RMS ratio.
    """
    bank = TemplateBank()
    for wav, ann in words:
        bounds = ann.bounds(len(wav))
        for index, seg in enumerate(ann.segments):
            if not seg.phoneme_class.is_obstruent or seg.error is not ErrorType.NONE:
                continue
            context, vowel_rms = _neighbor_vowel(ann, index, bounds, wav)
            start, end = bounds[index]
            piece = wav.slice(start, end)
            if (seg.label, context) in bank or vowel_rms <= 0:
                continue
            bank.add(seg.label, context, piece, piece.rms() / vowel_rms)
    logger.info(f"Built template bank with {len(bank)} exemplar(s)")
    return bank


# --------------------------------------------------------------------------
# Batch processing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    wav_path: str
    annotation_path: str
    template_id: str


@dataclass
class RowResult:
    row: ManifestRow
    word: str = ''
    error: str = ''
    scope: str = ''
    status: str = STATUS_OK
    message: str = ''
    output_path: str = ''
    metrics: object = None      # MetricsReport or None


@dataclass
class BatchReport:
    results: list = field(default_factory=list)

    @property
    def failed(self):
        return [r for r in self.results if r.status != STATUS_OK]

    @property
    def success(self):
        return not self.failed


def read_manifest(path):
    """Rows of `wav_path,annotation_path,reference_template_id`; relative paths resolve against the manifest."""
    root = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline='', encoding='utf-8') as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if line_no == 1 and row[0].strip() == 'wav_path':
                continue
            if len(row) < 2:
                raise ValueError(f"{path} line {line_no}: expected wav_path,annotation_path,reference_template_id")
            resolved = [c.strip() if os.path.isabs(c.strip()) else os.path.join(root, c.strip()) for c in row[:2]]
            rows.append(ManifestRow(resolved[0], resolved[1], row[2].strip() if len(row) > 2 else ''))
    return rows


def load_word(row):
    """Read a manifest row's wav (at the enhancement rate) and annotation; the word is its joined labels."""
    wav = resample(read_wav(row.wav_path), ENHANCE_RATE)
    return wav, load_annotation(row.annotation_path, wav)


def _process_row(row, scope, method, gmm, nmf, bank, templates, out_dir, settings):
    result = RowResult(row=row, scope=scope.value)
    try:
        wav, ann = load_word(row)
        result.word = ann.word
        result.error = ann.word_error().label
        plan = default_plan(ann, scope, method)
        enhanced = enhance_word(wav, ann, plan, gmm=gmm, nmf=nmf, bank=bank, settings=settings)
        if out_dir:
            stem = os.path.splitext(os.path.basename(row.wav_path))[0]
            result.output_path = os.path.join(out_dir, f"{stem}_{scope.value}_{method.value}.wav")
            write_wav(enhanced, result.output_path)
        if templates is not None and row.template_id:
            result.metrics = score_word(enhanced, templates.get(row.template_id))
    except Exception as e:
        logger.error(f"Error processing {row.wav_path}: {str(e)}")
        result.status = STATUS_FAILED
        result.message = str(e)
    return result


def batch_enhance(manifest, scope=Scope.BOTH, method=Method.RULE, gmm=None, nmf=None, bank=None,
                  templates=None, out_dir=None, settings=EnhanceSettings(), jobs=1):
    """
    Enhance every manifest row, isolating per-row failures.

    Returns:
        BatchReport with one RowResult per row, in manifest order
    """
    scope = Scope(scope)
    method = Method(method)
    rows = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)
    if method is Method.GMM and gmm is None:
        raise ConfigurationError("method=gmm requires a GMM model")
    if method is Method.NMF and nmf is None:
        raise ConfigurationError("method=nmf requires NMF dictionaries")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    logger.info(f"Enhancing {len(rows)} word(s): scope={scope.value}, method={method.value}, jobs={jobs}")

    def work(row):
        return _process_row(row, scope, method, gmm, nmf, bank, templates, out_dir, settings)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, rows))
    else:
        results = [work(row) for row in rows]

    report = BatchReport(results)
    logger.info(f"Enhancement finished: {len(results) - len(report.failed)} ok, {len(report.failed)} failed")
    return report


def evaluate_manifest(manifest, templates, scope_label='original', jobs=1):
    """Score unprocessed manifest words against their templates."""
    rows = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)

    def work(row):
        result = RowResult(row=row, scope=scope_label)
        try:
            wav, ann = load_word(row)
            result.word = ann.word
            result.error = ann.word_error().label
            result.metrics = score_word(wav, templates.get(row.template_id))
        except Exception as e:
            logger.error(f"Error scoring {row.wav_path}: {str(e)}")
            result.status = STATUS_FAILED
            result.message = str(e)
        return result

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, rows))
    else:
        results = [work(row) for row in rows]
    return BatchReport(results)
