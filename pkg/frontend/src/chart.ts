// Inline SVG loss chart. Pure string builder: the displayed series is exactly
// the server's series, one polyline point per stored value, no smoothing.

export function lossChartSvg(series: number[], width = 480, height = 160): string {
  const pad = 8;
  if (series.length === 0) {
    return `<svg width="${width}" height="${height}" role="img">` +
      `<text x="${width / 2}" y="${height / 2}" text-anchor="middle">no data yet</text></svg>`;
  }
  const lo = Math.min(...series);
  const hi = Math.max(...series);
  const span = hi - lo || 1;
  const x = (i: number) =>
    series.length === 1 ? width / 2 : pad + (i * (width - 2 * pad)) / (series.length - 1);
  const y = (v: number) => height - pad - ((v - lo) * (height - 2 * pad)) / span;
  const points = series.map((v, i) => `${x(i).toFixed(2)},${y(v).toFixed(2)}`).join(" ");
  return `<svg width="${width}" height="${height}" role="img" data-points="${series.length}">` +
    `<polyline fill="none" stroke="currentColor" stroke-width="1.5" points="${points}"/>` +
    `<text x="${pad}" y="${pad + 4}" font-size="10">${hi.toPrecision(4)}</text>` +
    `<text x="${pad}" y="${height - 2}" font-size="10">${lo.toPrecision(4)}</text>` +
    `</svg>`;
}
