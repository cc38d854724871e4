// Minimal SVG line chart for the ability-estimate trajectory.

const WIDTH = 420;
const HEIGHT = 160;
const PAD = 18;

export function renderTrajectory(svg: SVGSVGElement, trajectory: number[]): void {
    svg.setAttribute("viewBox", `0 0 ${WIDTH} ${HEIGHT}`);
    while (svg.firstChild) {
        svg.removeChild(svg.firstChild);
    }
    const ns = "http://www.w3.org/2000/svg";

    const axis = document.createElementNS(ns, "line");
    const midY = HEIGHT / 2;
    axis.setAttribute("x1", String(PAD));
    axis.setAttribute("x2", String(WIDTH - PAD));
    axis.setAttribute("y1", String(midY));
    axis.setAttribute("y2", String(midY));
    axis.setAttribute("class", "chart-axis");
    svg.appendChild(axis);

    if (trajectory.length === 0) {
        return;
    }
    const span = Math.max(2.0, ...trajectory.map((v) => Math.abs(v))) * 1.1;
    const x = (i: number) =>
        trajectory.length === 1
            ? WIDTH / 2
            : PAD + (i * (WIDTH - 2 * PAD)) / (trajectory.length - 1);
    const y = (v: number) => midY - (v / span) * (HEIGHT / 2 - PAD);

    if (trajectory.length > 1) {
        const line = document.createElementNS(ns, "polyline");
        line.setAttribute(
            "points",
            trajectory.map((v, i) => `${x(i)},${y(v)}`).join(" "),
        );
        line.setAttribute("class", "chart-line");
        line.setAttribute("fill", "none");
        svg.appendChild(line);
    }
    trajectory.forEach((v, i) => {
        const dot = document.createElementNS(ns, "circle");
        dot.setAttribute("cx", String(x(i)));
        dot.setAttribute("cy", String(y(v)));
        dot.setAttribute("r", "3.5");
        dot.setAttribute("class", "chart-point");
        svg.appendChild(dot);
    });
}
